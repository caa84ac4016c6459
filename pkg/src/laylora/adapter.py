"""Low-rank adapters: vanilla LoRA and the shared-A / multi-B asymmetric variant.

A site computes ``y = W0 x + sum_i alpha_i * B_i (A x)``. With a shared ``A``
the projection ``z = A x`` is computed once and then fanned out to the
branches; with one ``A`` per branch (``multi_lora``) each branch is an
independent LoRA pair. No ``alpha_lora / r`` scaling is applied.
"""
from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays
from .errors import ConfigurationError, ControlError, DimensionError, RoutingError
from .model import SITE_KINDS, Transformer, site_name, site_shape

SCHEMES = ("lora", "multi_lora", "magical")
MODES = ("switch", "router")
DEFAULT_PATTERNS = ("q", "v", "up", "down")
ALPHA_TOL = 1e-9


# --------------------------------------------------------------------- control


@dataclass
class BranchControl:
    """Branch weights plus the mode that constrains them.

    ``switch`` requires a one-hot vector, ``router`` a point on the simplex.
    ``off`` (all zeros) disables every branch and exists for validation runs
    that must reproduce the frozen base model.
    """

    mode: str
    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        validate_alpha(self.alpha, self.mode)

    @classmethod
    def switch(cls, index: int, n: int) -> "BranchControl":
        from .switch import switch_alpha

        return cls("switch", switch_alpha(index, n))

    @classmethod
    def off(cls, n: int) -> "BranchControl":
        return cls("off", np.zeros(n))


def validate_alpha(alpha: np.ndarray, mode: str) -> None:
    """Check a [N] or [batch, N] alpha against a mode's invariant."""
    a = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    if mode == "switch":
        ok = np.all((a == 0.0) | (a == 1.0)) and np.all((a == 1.0).sum(axis=1) == 1)
        if not ok:
            raise ControlError("switch mode requires exactly one alpha_i = 1 and the rest 0")
    elif mode == "router":
        if np.any(a < 0) or np.any(np.abs(a.sum(axis=1) - 1.0) > ALPHA_TOL):
            raise ControlError("router mode requires alpha_i >= 0 with sum 1")
    elif mode == "off":
        if np.any(a != 0.0):
            raise ControlError("off mode requires all alpha_i = 0")
    else:
        raise ControlError(f"unknown control mode {mode!r}")


# ------------------------------------------------------------ single-vector API


@dataclass
class LoraPair:
    A: Tensor
    B: Tensor

    def __post_init__(self):
        r, k = self.A.shape
        d, r2 = self.B.shape
        if r != r2:
            raise DimensionError(f"A is {self.A.shape} but B is {self.B.shape}")
        if not r < min(d, k):
            raise DimensionError(f"rank {r} must be below min(d={d}, k={k})")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @classmethod
    def init(cls, d: int, k: int, r: int, rng: np.random.Generator) -> "LoraPair":
        return cls(Tensor(rng.normal(0.0, 0.02, (r, k)), requires_grad=True),
                   Tensor(np.zeros((d, r)), requires_grad=True))


@dataclass
class AsymmetricAdapter:
    A_shared: Tensor
    branches: list[Tensor]
    control: BranchControl

    def __post_init__(self):
        if not self.branches:
            raise ConfigurationError("an asymmetric adapter needs at least one branch")
        r = self.A_shared.shape[0]
        shapes = {b.shape for b in self.branches}
        if len(shapes) != 1 or next(iter(shapes))[1] != r:
            raise DimensionError(f"branches must all be [d, {r}], got {sorted(shapes)}")
        if len(self.control.alpha) != len(self.branches):
            raise ControlError(f"{len(self.control.alpha)} weights for {len(self.branches)} branches")

    @property
    def n_branches(self) -> int:
        return len(self.branches)


def _check_linear(x: Tensor, W0: Tensor) -> None:
    if W0.ndim != 2 or x.shape[-1] != W0.shape[1]:
        raise DimensionError(f"input {x.shape} does not fit W0 {W0.shape}")


def lora_forward(x: Tensor, W0: Tensor, pair: LoraPair) -> Tensor:
    """``W0 x + B (A x)``."""
    x = ad.as_tensor(x)
    _check_linear(x, W0)
    if pair.B.shape[0] != W0.shape[0] or pair.A.shape[1] != W0.shape[1]:
        raise DimensionError(f"pair A{pair.A.shape} B{pair.B.shape} does not fit W0 {W0.shape}")
    return ad.add(ad.matmul(W0, x), ad.matmul(pair.B, ad.matmul(pair.A, x)))


def magical_forward(x: Tensor, W0: Tensor, adapter: AsymmetricAdapter) -> Tensor:
    """``W0 x + sum_i alpha_i B_i z`` with ``z = A x`` computed once."""
    x = ad.as_tensor(x)
    _check_linear(x, W0)
    adapter.control.validate()
    if adapter.A_shared.shape[1] != W0.shape[1] or adapter.branches[0].shape[0] != W0.shape[0]:
        raise DimensionError("adapter does not fit W0")
    y = ad.matmul(W0, x)
    z = ad.matmul(adapter.A_shared, x)
    for a_i, B_i in zip(adapter.control.alpha, adapter.branches):
        if a_i == 0.0:
            continue
        term = ad.matmul(B_i, z)
        y = ad.add(y, term if a_i == 1.0 else ad.scale(term, a_i))
    return y


# ------------------------------------------------------------------- sites


class AdapterSite:
    """Adapter state for one wrapped weight matrix, operating on batches."""

    def __init__(self, name: str, d_out: int, d_in: int, rank: int, n_branches: int,
                 shared_a: bool, rng: np.random.Generator):
        if not rank < min(d_out, d_in):
            raise ConfigurationError(f"rank {rank} must be below min(d={d_out}, k={d_in}) at {name}")
        self.name = name
        self.d_out, self.d_in, self.rank = d_out, d_in, rank
        self.shared_a = shared_a
        n_a = 1 if shared_a else n_branches
        # A draws come first, then B, so N=1 shared and N=1 unshared initialise identically.
        self.A = [Tensor(rng.normal(0.0, 0.02, (rank, d_in)), requires_grad=True, name=f"{name}.A.{i}")
                  for i in range(n_a)]
        self.B = [Tensor(np.zeros((d_out, rank)), requires_grad=True, name=f"{name}.B.{i}")
                  for i in range(n_branches)]

    @property
    def n_branches(self) -> int:
        return len(self.B)

    def a_for(self, branch: int) -> Tensor:
        return self.A[0] if self.shared_a else self.A[branch]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, a in enumerate(self.A):
            out[f"adapter.{self.name}.A.{i}"] = a
        for i, b in enumerate(self.B):
            out[f"adapter.{self.name}.B.{i}"] = b
        return out

    def forward(self, x: Tensor, W0: Tensor, alpha: np.ndarray | Tensor | None) -> Tensor:
        """``x`` is [..., d_in]; ``alpha`` is [batch, N] (or None: base only)."""
        y = ad.linear(x, W0)
        if alpha is None:
            return y
        lead = (slice(None),) + (None,) * (x.ndim - 2) + (slice(None),)
        if isinstance(alpha, Tensor):
            z = ad.linear(x, self.A[0]) if self.shared_a else None
            for i, B_i in enumerate(self.B):
                zi = z if z is not None else ad.linear(x, self.A[i])
                w = ad.take(alpha, (slice(None), slice(i, i + 1)))
                w = ad.reshape(w, (alpha.shape[0],) + (1,) * (x.ndim - 1))
                y = ad.add(y, ad.mul(ad.linear(zi, B_i), w))
            return y
        alpha = np.asarray(alpha, dtype=np.float64)
        z = None
        for i, B_i in enumerate(self.B):
            col = alpha[:, i]
            if not np.any(col):
                continue
            if self.shared_a:
                if z is None:
                    z = ad.linear(x, self.A[0])
                zi = z
            else:
                zi = ad.linear(x, self.A[i])
            term = ad.linear(zi, B_i)
            if not np.all(col == 1.0):
                term = ad.mul(term, Tensor(col.reshape((-1,) + (1,) * (x.ndim - 1))))
            y = ad.add(y, term)
        return y


@dataclass
class RouterGate:
    """Softmax gate producing router-mode branch weights."""

    weight: Tensor
    bias: Tensor
    scope: str = "global"

    @classmethod
    def init(cls, n: int, d: int, rng: np.random.Generator, scope: str = "global") -> "RouterGate":
        return cls(Tensor(rng.normal(0.0, 0.02, (n, d)), requires_grad=True),
                   Tensor(np.zeros(n), requires_grad=True), scope)

    def __call__(self, pooled: Tensor) -> Tensor:
        return ad.softmax(ad.linear(pooled, self.weight, self.bias), axis=-1)


# ------------------------------------------------------------------ attach


@dataclass
class AttachSpec:
    """Where and how to attach adapters.

    ``patterns`` match site kinds (``q``, ``v``, ``up`` ...) or full site
    names via shell-style wildcards; ``layers=None`` means every layer.
    """

    rank: int = 4
    n_branches: int = 3
    scheme: str = "magical"
    mode: str = "switch"
    patterns: Sequence[str] = DEFAULT_PATTERNS
    layers: Sequence[int] | None = None
    router_scope: str = "global"
    styles: Sequence[str] | None = None
    semantic_site: str = "q"
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.router_scope not in ("global", "per-site"):
            raise ConfigurationError(f"router_scope must be 'global' or 'per-site'")
        if self.rank < 1 or self.n_branches < 1:
            raise ConfigurationError("rank and n_branches must be >= 1")
        if self.scheme == "lora" and self.n_branches != 1:
            raise ConfigurationError("scheme 'lora' has exactly one branch")
        if self.styles is not None and len(self.styles) != self.n_branches:
            raise ConfigurationError(f"{len(self.styles)} styles for {self.n_branches} branches")

    def to_dict(self) -> dict:
        return {
            "rank": self.rank, "n_branches": self.n_branches, "scheme": self.scheme, "mode": self.mode,
            "patterns": list(self.patterns), "layers": None if self.layers is None else list(self.layers),
            "router_scope": self.router_scope, "styles": None if self.styles is None else list(self.styles),
            "semantic_site": self.semantic_site, "seed": self.seed,
        }


def _matches(name: str, kind: str, patterns: Sequence[str]) -> bool:
    return any(p == kind or fnmatch.fnmatch(name, p) for p in patterns)


class AdaptedModel:
    """A frozen :class:`Transformer` plus adapter sites and branch control."""

    def __init__(self, base: Transformer, spec: AttachSpec):
        self.base = base.freeze()
        self.spec = spec
        self.mode = spec.mode
        cfg = base.config
        layers = range(cfg.n_layers) if spec.layers is None else spec.layers
        for layer in layers:
            if not 0 <= layer < cfg.n_layers:
                raise ConfigurationError(f"layer {layer} does not exist (model has {cfg.n_layers})")
        rng = np.random.default_rng(spec.seed)
        self.sites: dict[str, AdapterSite] = {}
        shared = spec.scheme != "multi_lora"
        for layer in sorted(set(layers)):
            for kind in SITE_KINDS:
                name = site_name(layer, kind)
                if _matches(name, kind, spec.patterns):
                    d_out, d_in = site_shape(cfg, kind)
                    self.sites[name] = AdapterSite(name, d_out, d_in, spec.rank, spec.n_branches, shared, rng)
        if not self.sites:
            raise ConfigurationError(f"patterns {list(spec.patterns)} matched no site")
        self.gates: dict[str, RouterGate] = {}
        if spec.mode == "router":
            if spec.router_scope == "global":
                self.gates["global"] = RouterGate.init(spec.n_branches, cfg.d_model, rng)
            else:
                for name, site in self.sites.items():
                    self.gates[name] = RouterGate.init(spec.n_branches, site.d_in, rng, "per-site")
        self.styles = list(spec.styles) if spec.styles is not None else [str(i) for i in range(spec.n_branches)]
        self._pool_weights = None

    # --------------------------------------------------------------- surface

    @property
    def config(self):
        return self.base.config

    @property
    def n_branches(self) -> int:
        return self.spec.n_branches

    def branch_of(self, style: str) -> int:
        if self.n_branches == 1 and self.spec.styles is None:
            return 0  # a single unnamed branch serves every style
        try:
            return self.styles.index(style)
        except ValueError:
            raise RoutingError(f"style {style!r} has no branch (known: {self.styles})") from None

    def trainable_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for site in self.sites.values():
            out.update(site.parameters())
        for name, gate in self.gates.items():
            out[f"router.{name}.weight"] = gate.weight
            out[f"router.{name}.bias"] = gate.bias
        return out

    def n_trainable(self) -> int:
        return sum(t.data.size for t in self.trainable_parameters().values())

    def semantic_a(self, layer: int, branch: int = 0) -> Tensor:
        """The A matrix used to project layer ``layer``'s hidden states."""
        name = site_name(layer, self.spec.semantic_site)
        site = self.sites.get(name)
        if site is None:
            raise ConfigurationError(f"no adapter at {name}; semantic projection needs it")
        if site.d_in != self.base.config.d_model:
            raise ConfigurationError(f"semantic site {name} does not read the residual stream")
        return site.a_for(branch)

    def semantic_input(self, layer: int, hidden: Tensor) -> Tensor:
        """What the semantic A actually reads: block ``layer``'s pre-attention layer norm of ``hidden``."""
        p = self.base.params
        return ad.layer_norm(hidden, p[f"blocks.{layer}.ln1.g"], p[f"blocks.{layer}.ln1.b"])

    # --------------------------------------------------------------- control

    def resolve_alpha(self, acts0: Tensor, branch=None, alpha=None, pool_len=None):
        """Branch weights for a forward pass, as [batch, N] (array or Tensor)."""
        B = acts0.shape[0]
        N = self.n_branches
        self._pool_weights = None
        if alpha is not None:
            a = np.asarray(alpha, dtype=np.float64)
            if a.ndim == 1:
                a = np.broadcast_to(a, (B, N))
            if a.shape != (B, N):
                raise ControlError(f"alpha has shape {a.shape}, expected ({B}, {N})")
            if np.any(a != 0):
                validate_alpha(a, self.mode)
            return a
        if self.mode == "switch":
            if branch is None:
                raise RoutingError("switch mode needs a branch index per sequence")
            from .switch import switch_alpha

            idx = np.broadcast_to(np.asarray(branch, dtype=np.int64), (B,))
            return np.stack([switch_alpha(int(i), N) for i in idx])
        T = acts0.shape[1]
        m = np.zeros((B, T))
        lens = np.broadcast_to(np.asarray(T if pool_len is None else pool_len), (B,))
        for b, n in enumerate(lens):
            m[b, : max(1, min(int(n), T))] = 1.0
        self._pool_weights = m
        if "global" in self.gates:
            return self.gates["global"](ad.mean_pool(acts0, m))
        return "per-site"

    def site_alpha(self, name: str, x: Tensor, alpha):
        if isinstance(alpha, str):
            return self.gates[name](ad.mean_pool(x, self._pool_weights))
        return alpha

    def router_alpha(self, tokens, pool_len=None) -> np.ndarray:
        """Router weights the global gate assigns to each sequence (no tape)."""
        if "global" not in self.gates:
            raise ConfigurationError("router_alpha needs a global router gate")
        ids = np.atleast_2d(np.asarray(tokens))
        x = ad.add(ad.embedding(self.base.params["tok_emb"], ids),
                   ad.take(self.base.params["pos_emb"], slice(0, ids.shape[1])))
        return np.asarray(self.resolve_alpha(x, pool_len=pool_len).data)

    def forward(self, tokens, **kw):
        return self.base.forward(tokens, adapter=self, **kw)

    __call__ = forward

    # ------------------------------------------------------------ checkpoint

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.trainable_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.trainable_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ConfigurationError(f"checkpoint lacks {sorted(missing)[:3]}...")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ConfigurationError(f"{k}: checkpoint shape {arrays[k].shape} != {t.shape}")
            t.data[...] = arrays[k]

    def save(self, path, dtype: str = "float32", extra_meta: dict | None = None):
        meta = {"kind": "adapter", "attach": self.spec.to_dict(), **(extra_meta or {})}
        return save_arrays(path, self.state_arrays(), meta, dtype)

    @classmethod
    def load(cls, path, base: Transformer) -> "AdaptedModel":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "adapter":
            raise ConfigurationError(f"{path} does not hold an adapter checkpoint")
        spec = AttachSpec(**meta["attach"])
        model = cls(base, spec)
        model.load_state_arrays(arrays)
        return model


def attach(model: Transformer, spec: AttachSpec) -> AdaptedModel:
    """Wrap the targeted weight matrices of ``model``; base weights are frozen."""
    return AdaptedModel(model, spec)


# --------------------------------------------------------------- accounting


def param_count(d: int, k: int, r: int, N: int = 1, sites: int = 1, scheme: str = "magical") -> int:
    """Trainable adapter parameters (router gate excluded)."""
    if min(d, k, r, N, sites) < 1:
        raise ConfigurationError("param_count arguments must be positive")
    if scheme == "lora":
        return sites * (r * k + d * r)
    if scheme == "multi_lora":
        return N * sites * (r * k + d * r)
    if scheme == "magical":
        return sites * (r * k + N * d * r)
    raise ConfigurationError(f"unknown scheme {scheme!r}")


def gate_param_count(N: int, d_model: int, n_gates: int = 1) -> int:
    return n_gates * (N * d_model + N)


def reduction(ours: int, baseline: int) -> float:
    """Percentage reduction of ``ours`` relative to ``baseline``."""
    return 100.0 * (baseline - ours) / baseline


@dataclass
class SiteCount:
    site: str
    d: int
    k: int
    counts: dict[str, int] = field(default_factory=dict)


def count_sites(config, spec: AttachSpec) -> list[SiteCount]:
    """Per-site counts for each scheme, for sites selected by ``spec``."""
    layers = range(config.n_layers) if spec.layers is None else spec.layers
    rows = []
    for layer in layers:
        for kind in SITE_KINDS:
            name = site_name(layer, kind)
            if _matches(name, kind, spec.patterns):
                d, k = site_shape(config, kind)
                counts = {
                    "lora": param_count(d, k, spec.rank * spec.n_branches, 1, 1, "lora"),
                    "multi_lora": param_count(d, k, spec.rank, spec.n_branches, 1, "multi_lora"),
                    "magical": param_count(d, k, spec.rank, spec.n_branches, 1, "magical"),
                }
                rows.append(SiteCount(name, d, k, counts))
    return rows
