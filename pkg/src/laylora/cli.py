"""``laylora`` command line: pretrain, probe, train, evaluate, generate, analyze, sweep, paramcount.

Every subcommand works inside one run directory (``--out``) and records the
SHA-256 of each file it wrote in ``manifest.json``. Outputs depend only on
the configuration and the seed, so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapter import AdaptedModel, AttachSpec, attach, count_sites, param_count, reduction
from .config import RunConfig, load_config
from .contrastive import TrainConfig, Trainer
from .data import PairedSample, SynthSpec, Tokenizer, build_vocab, load_jsonl, split, synth_corpus
from .errors import ConfigurationError, LayLoraError
from .experiments import (DeskSetup, PretrainConfig, analyze, evaluate, generate, identity_pairs,
                          pretrain_backbone, rank_sweep, recommender_sweep, scheme_comparison, synthetic_tokenizer,
                          train_adapter)
from .metrics import rows_to_tsv
from .model import ModelConfig, Transformer
from .probing import ProbeReport, SemanticLayerSelector
from .switch import ExecRecommender, RecommendationQuery, make_recommender

log = logging.getLogger("laylora")

ENV_OUT = "LAYLORA_OUT"
ENV_THREADS = "LAYLORA_THREADS"


# ----------------------------------------------------------------- run context


class Run:
    """Resolved configuration plus lazily built shared artifacts of one run directory."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.dir = out
        self.dir.mkdir(parents=True, exist_ok=True)
        self._corpus: tuple[list[PairedSample], list[PairedSample]] | None = None
        self._tok: Tokenizer | None = None
        self._backbone: Transformer | None = None

    # data --------------------------------------------------------------
    @property
    def synthetic(self) -> bool:
        return self.cfg.data.train is None

    def corpus(self) -> tuple[list[PairedSample], list[PairedSample]]:
        if self._corpus is None:
            d = self.cfg.data
            if self.synthetic:
                full = synth_corpus(SynthSpec(samples_per_style=d.samples_per_style, seed=self.cfg.seed))
                self._corpus = split(full, d.split_ratio, self.cfg.seed)
            else:
                self._corpus = (load_jsonl(d.train), load_jsonl(d.test))
        return self._corpus

    def tokenizer(self) -> Tokenizer:
        if self._tok is None:
            path = self.backbone_dir() / "tokenizer.json"
            if path.exists():
                self._tok = Tokenizer.load(path)
            elif self.synthetic:
                self._tok = synthetic_tokenizer()
            else:
                train, test = self.corpus()
                self._tok = build_vocab(train + test)
        return self._tok

    # backbone ----------------------------------------------------------
    def backbone_dir(self) -> Path:
        return Path(self.cfg.backbone) if self.cfg.backbone else self.dir / "backbone"

    def model_config(self) -> ModelConfig:
        m = self.cfg.model
        return ModelConfig(vocab_size=len(self.tokenizer()), n_layers=m.n_layers, d_model=m.d_model,
                           n_heads=m.n_heads, d_ff=m.d_ff, max_seq=m.max_seq, seed=self.cfg.pretrain.seed)

    def backbone(self) -> Transformer:
        if self._backbone is None:
            bdir = self.backbone_dir()
            if (bdir / "manifest.json").exists():
                self._backbone = Transformer.load(bdir)
            else:
                self._backbone = self.pretrain()
        return self._backbone

    def pretrain(self) -> Transformer:
        p = self.cfg.pretrain
        pcfg = PretrainConfig(p.copy_samples, p.steps, p.lr, p.batch_size, p.seed)
        copies = None if self.synthetic else identity_pairs(self.corpus()[0])
        model = pretrain_backbone(self.tokenizer(), self.model_config(), pcfg, copies)
        bdir = self.dir / "backbone"
        model.save(bdir)
        self.tokenizer().save(bdir / "tokenizer.json")
        # Reload so every consumer sees the exported (float32-rounded) weights.
        self._backbone = Transformer.load(bdir)
        return self._backbone

    # adapters ----------------------------------------------------------
    def styles(self) -> list[str]:
        if self.cfg.attach.styles is not None:
            return list(self.cfg.attach.styles)
        return sorted({s.style for s in self.corpus()[0]})

    def attach_spec(self, **overrides) -> AttachSpec:
        a = self.cfg.attach
        scheme = overrides.pop("scheme", a.scheme)
        styles = self.styles()
        single = scheme == "lora"
        kw = dict(rank=a.rank, n_branches=1 if single else len(styles), scheme=scheme, mode=a.mode,
                  patterns=tuple(a.patterns), layers=a.layers, router_scope=a.router_scope,
                  styles=None if single else styles, semantic_site=a.semantic_site, seed=self.cfg.seed)
        kw.update(overrides)
        return AttachSpec(**kw)

    def train_config(self, layers: Sequence[int] | None, **overrides) -> TrainConfig:
        t = self.cfg.train
        kw = dict(batch_size=t.batch_size, lr=t.lr, epochs=t.epochs, steps=t.steps, lam=t.lam, tau=t.tau,
                  semantic_layers=None if layers is None else list(layers), seed=self.cfg.seed,
                  warmup_ratio=t.warmup_ratio, weight_decay=t.weight_decay)
        kw.update(overrides)
        return TrainConfig(**kw)

    def probe_report(self, required: bool) -> ProbeReport | None:
        path = self.dir / "probe" / "report.tsv"
        if path.exists():
            return ProbeReport.load(path)
        if required:
            raise ConfigurationError(f"contrastive weight > 0 needs a probe report at {path}; run `laylora probe` first")
        return None

    def semantic_layers(self) -> list[int]:
        rep = self.probe_report(required=False)
        return rep.selected if rep is not None else [0]

    def load_adapter(self, path: str | None) -> AdaptedModel:
        ckpt = Path(path) if path else self.dir / "train" / "adapter"
        if not (ckpt / "manifest.json").exists():
            raise ConfigurationError(f"no adapter checkpoint at {ckpt}; run `laylora train` first")
        return AdaptedModel.load(ckpt, self.backbone().copy())

    def setup(self) -> DeskSetup:
        d = self.cfg.data
        return DeskSetup(samples_per_style=d.samples_per_style, split_ratio=d.split_ratio, rank=self.cfg.attach.rank,
                         styles=tuple(self.styles()), train=self.train_config(None),
                         max_new=self.cfg.evaluate.max_new, probe_steps=self.cfg.probe.n_steps)

    # bookkeeping -------------------------------------------------------
    def write(self, rel: str, text: str) -> Path:
        path = self.dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path

    def finish(self, command: str) -> None:
        cfg = self.cfg.to_dict()
        cfg["out"] = None  # the location of the run is not part of its identity
        self.write("config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        manifest_path = self.dir / "manifest.json"
        outputs = {}
        for p in sorted(self.dir.rglob("*")):
            if p.is_file() and p != manifest_path:
                outputs[p.relative_to(self.dir).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"format": "laylora-run"}
        commands = manifest.setdefault("commands", [])
        if command not in commands:
            commands.append(command)
        manifest["seed"] = self.cfg.seed
        manifest["outputs"] = outputs
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolve_out(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(ENV_OUT):
        return Path(os.environ[ENV_OUT])
    if cfg.out:
        return Path(cfg.out)
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    return Path("runs") / stamp


# ------------------------------------------------------------------ commands


def cmd_pretrain(run: Run, args) -> None:
    run.pretrain()
    print(f"backbone written to {run.dir / 'backbone'}")


def cmd_probe(run: Run, args) -> None:
    p = run.cfg.probe
    train, _ = run.corpus()
    sel = SemanticLayerSelector(run.backbone(), run.tokenizer(), k=p.k, negatives_per_positive=p.negatives_per_positive,
                                seed=run.cfg.seed, learning_rate=p.learning_rate, n_steps=p.n_steps).fit(train)
    run.write("probe/report.tsv", sel.report_.to_tsv())
    print(sel.report_.to_tsv(), end="")


def cmd_train(run: Run, args) -> None:
    lam = run.cfg.train.lam
    layers = run.probe_report(required=True).selected if lam > 0 else None
    train, _ = run.corpus()
    model = attach(run.backbone().copy(), run.attach_spec())
    trainer = Trainer(model, run.tokenizer(), train, run.train_config(layers))
    state = run.dir / "train" / "state"
    if args.resume and (state / "manifest.json").exists():
        trainer.load_state(state)
    trainer.run(until=args.until)
    trainer.save_state(state)
    run.write("train/log.tsv", trainer.log.to_tsv())
    if trainer.step_index >= trainer.total_steps:
        model.save(run.dir / "train" / "adapter", dtype="float32",
                   extra_meta={"steps": trainer.step_index, "semantic_layers": layers or []})
        rows = trainer.log.rows
        print(f"trained {len(rows)} steps: lm loss {rows[0]['lm_loss']:.4f} -> {rows[-1]['lm_loss']:.4f}")
    else:
        print(f"stopped after step {trainer.step_index}/{trainer.total_steps}; resume with --resume")


def _recommender(run: Run, args):
    return make_recommender(args.recommender or run.cfg.recommender, seed=run.cfg.seed)


def cmd_evaluate(run: Run, args) -> None:
    model = run.load_adapter(args.checkpoint)
    _, test = run.corpus()
    rec = _recommender(run, args)
    try:
        res = evaluate(model, run.tokenizer(), test, rec, run.cfg.evaluate.max_new)
    finally:
        if isinstance(rec, ExecRecommender):
            rec.close()
    cols = ["id", "style", "chosen", "rouge1", "rouge2", "rougeL", "bleu", "generation", "reference"]
    run.write("evaluate/generations.tsv", rows_to_tsv(res.rows, cols))
    table = rows_to_tsv(res.table(), ["style", "n", "rouge1", "rouge2", "rougeL", "bleu"])
    run.write("evaluate/metrics.tsv", table)
    print(table, end="")


def cmd_generate(run: Run, args) -> None:
    model = run.load_adapter(args.checkpoint)
    if args.text is not None:
        texts = [args.text]
    elif args.input:
        texts = [t for t in Path(args.input).read_text(encoding="utf-8").splitlines() if t.strip()]
    else:
        raise ConfigurationError("generate needs --text or --input")
    if model.mode == "router":
        branches = None
    elif model.n_branches == 1 and model.spec.styles is None:
        branches = [0] * len(texts)
    elif args.style:
        branches = [model.branch_of(args.style)] * len(texts)
    else:
        rec = _recommender(run, args)
        if not isinstance(rec, ExecRecommender):
            raise ConfigurationError("without --style, generate needs an exec:<command> recommender")
        with rec:
            labels = [rec.recommend(RecommendationQuery(t, tuple(model.styles))) for t in texts]
        branches = [model.branch_of(l) for l in labels]
    samples = [PairedSample(f"in-{i:05d}", t, "", "") for i, t in enumerate(texts)]
    gens = generate(model, run.tokenizer(), samples, None if branches is None else np.array(branches),
                    run.cfg.evaluate.max_new)
    rows = [{"id": s.id, "branch": "router" if branches is None else model.styles[b] if model.spec.styles else b,
             "expert": s.expert, "generation": g} for s, g, b in zip(samples, gens, branches or [0] * len(gens))]
    run.write("generate/generations.tsv", rows_to_tsv(rows, ["id", "branch", "expert", "generation"]))
    for g in gens:
        print(g)


def cmd_analyze(run: Run, args) -> None:
    model = run.load_adapter(args.checkpoint)
    comparison = run.load_adapter(args.compare) if args.compare else None
    _, test = run.corpus()
    rec = _recommender(run, args)
    layers = run.semantic_layers()
    bundle = analyze(model, run.tokenizer(), test, layers, rec, comparison, run.cfg.evaluate.max_new)
    run.write("analyze/kde_points.tsv",
              rows_to_tsv([{"x": x, "y": y, "group": g} for x, y, g in bundle.points], ["x", "y", "group"]))
    r = bundle.cross_correlation.shape[0]
    run.write("analyze/cross_correlation.tsv",
              rows_to_tsv([{"expert_dim": a, **{f"lay_{b}": float(bundle.cross_correlation[a, b]) for b in range(r)}}
                           for a in range(r)]))
    if bundle.confusion is not None:
        n = bundle.confusion.shape[0]
        names = model.styles
        run.write("analyze/confusion.tsv",
                  rows_to_tsv([{"true": names[t], **{names[p]: int(bundle.confusion[t, p]) for p in range(n)}}
                               for t in range(n)]))
    summary = [{"layer": bundle.layer, "mean_cosine": bundle.mean_cosine,
                "comparison_cosine": "" if bundle.comparison_cosine is None else bundle.comparison_cosine}]
    table = rows_to_tsv(summary)
    run.write("analyze/summary.tsv", table)
    print(table, end="")


def cmd_sweep(run: Run, args) -> None:
    axis = args.axis or run.cfg.sweep.axis
    values = json.loads(args.values) if args.values else list(run.cfg.sweep.values)
    setup = run.setup()
    seed = run.cfg.seed
    bb, tok = run.backbone(), run.tokenizer()
    if axis == "recommender_accuracy":
        train, test = run.corpus()
        layers = run.probe_report(required=True).selected if run.cfg.train.lam > 0 else None
        model, _ = train_adapter(bb, tok, train, run.attach_spec(), run.train_config(layers))
        rows = recommender_sweep(model, tok, test, [float(v) for v in values], seed, setup.max_new)
    elif axis == "rank":
        rows = rank_sweep(bb, tok, setup, [int(v) for v in values], seed, run.corpus())
    elif axis == "scheme":
        res = scheme_comparison(bb, tok, setup, seed, run.corpus())
        rows = [{"scheme": "multi_lora", "rank": setup.rank, "branches": setup.n_branches, "params": res.params,
                 **res.multi.overall},
                {"scheme": "lora", "rank": setup.rank * setup.n_branches, "branches": 1, "params": res.params,
                 **res.single.overall}]
    else:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; use rank, recommender_accuracy or scheme")
    table = rows_to_tsv(rows)
    run.write(f"sweep/{axis}.tsv", table)
    print(table, end="")


def cmd_paramcount(run: Run, args) -> None:
    n = args.branches or len(run.cfg.attach.styles or []) or 3
    spec = AttachSpec(rank=run.cfg.attach.rank, n_branches=n, patterns=tuple(run.cfg.attach.patterns),
                      layers=run.cfg.attach.layers)
    m = run.cfg.model
    cfg = ModelConfig(vocab_size=2, n_layers=m.n_layers, d_model=m.d_model, n_heads=m.n_heads, d_ff=m.d_ff,
                      max_seq=m.max_seq)
    sites = count_sites(cfg, spec)
    rows = [{"site": s.site, "d": s.d, "k": s.k, **s.counts} for s in sites]
    totals = {k: sum(r[k] for r in rows) for k in ("lora", "multi_lora", "magical")}
    rows.append({"site": "total", "d": "", "k": "", **totals})
    table = rows_to_tsv(rows, ["site", "d", "k", "lora", "multi_lora", "magical"])
    table += f"# rank={spec.rank} branches={n} (lora uses rank {spec.rank * n} for parity)\n"
    table += f"# magical vs multi_lora reduction: {reduction(totals['magical'], totals['multi_lora']):.2f}%\n"
    run.write("paramcount.tsv", table)
    print(table, end="")


COMMANDS = {
    "pretrain": (cmd_pretrain, "pretrain the copy-task backbone"),
    "probe": (cmd_probe, "probe every layer and select the semantic layer set"),
    "train": (cmd_train, "train adapters with the composite objective"),
    "evaluate": (cmd_evaluate, "generate for the test split and score it"),
    "generate": (cmd_generate, "generate lay text for given expert text"),
    "analyze": (cmd_analyze, "subspace points, cross-correlation and confusion matrix"),
    "sweep": (cmd_sweep, "rank / recommender-accuracy / scheme sweep"),
    "paramcount": (cmd_paramcount, "trainable-parameter counts per scheme"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laylora", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help=f"run directory (else ${ENV_OUT}, config `out`, or runs/<timestamp>)")
    common.add_argument("--recommender", help="oracle | sim:<p> | exec:<command>")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("evaluate", "generate", "analyze"):
            p.add_argument("--checkpoint", help="adapter checkpoint directory (default <out>/train/adapter)")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from <out>/train/state")
            p.add_argument("--until", type=int, help="stop (and save state) after this many steps")
        if name == "generate":
            p.add_argument("--text", help="one expert text")
            p.add_argument("--input", help="file with one expert text per line")
            p.add_argument("--style", help="lay-style branch to use")
        if name == "analyze":
            p.add_argument("--compare", help="second adapter checkpoint (e.g. trained without the constraint)")
        if name == "sweep":
            p.add_argument("--axis", choices=["rank", "recommender_accuracy", "scheme"])
            p.add_argument("--values", help="JSON list of axis values")
        if name == "paramcount":
            p.add_argument("--branches", type=int, help="number of branches N")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    try:
        if os.environ.get(ENV_THREADS):
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(int(os.environ[ENV_THREADS]))
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        run = Run(cfg, _resolve_out(args, cfg))
        COMMANDS[args.command][0](run, args)
        run.finish(args.command)
    except LayLoraError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return 0


if __name__ == "__main__":
    sys.exit(main())
