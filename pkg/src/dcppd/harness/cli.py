"""``dcppd`` command line: one command per experiment step, all outputs under ``runs/<hash>/``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from .. import io as dio
from ..reliance import RelianceError, load_trace, reliance_report, summary_csv
from ..synthdata import load_dataset, write_dataset
from . import pipeline as pl
from . import tables
from .config import CUE_SOURCES, TEST_SETTINGS, ConfigError, load_config
from .runs import MissingArtifactError, RunExistsError, RunStore

DATA = "data"
PROBE = "probe"


class Context:
    """Config, run store and lazily loaded upstream artifacts for one invocation."""

    def __init__(self, args):
        cfg = load_config(args.config)
        if args.set:
            cfg = cfg.updated(dict(_parse_override(s) for s in args.set))
        if args.runs:
            cfg = cfg.updated({"output_dir": args.runs})
        self.cfg = cfg
        self.store = RunStore(cfg)
        self._feats: Optional[pl.Features] = None

    def features(self) -> pl.Features:
        if self._feats is None:
            path = self.store.require(DATA, "features.safetensors", "gen-data")
            self._feats = pl.load_features(load_dataset(self.store.path(DATA) / "dataset"), path)
        return self._feats

    def probes(self) -> dict:
        return {qs: pl.load_probe(self.store.require(PROBE, f"{qs}.safetensors", "train-probe"))
                for qs in self.cfg["gen.cue_sets"]}

    def decoder(self, seed: int):
        return pl.load_decoder(self.store.require(f"decoder-s{seed}", "decoder.safetensors",
                                                  f"pretrain-decoder --seed {seed}"))

    def vlm(self, p: float, seed: int, no_image: bool) -> pl.VLM:
        name = pl.vlm_name(p, seed, no_image, self.cfg["train.cue_source"])
        flag = " --no-image" if no_image else ""
        return pl.load_vlm(self.store.require(name, "model.safetensors",
                                              f"train-vlm --seed {seed} --dropout {p:g}{flag}"))


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


# -- commands -------------------------------------------------------------------------------------


def cmd_gen_data(ctx: Context, args) -> None:
    cfg = ctx.cfg
    with ctx.store.record(DATA, "gen-data") as (d, info):
        dataset = pl.make_data(cfg)
        write_dataset(dataset, d / "dataset", include_volumes=cfg["data.write_volumes"])
        feats = pl.build_features(cfg, dataset)
        pl.save_features(feats, d / "features.safetensors")
        info["outputs"] = {"n": len(dataset), "embedding_dim": int(feats.embeddings.shape[1]),
                           "visual_tokens": list(feats.visual.shape[1:])}
    print(f"wrote {ctx.store.path(DATA)}")


def cmd_train_probe(ctx: Context, args) -> None:
    feats = ctx.features()
    with ctx.store.record(PROBE, "train-probe", seed=args.seed) as (d, info):
        probes, metrics = pl.fit_probes(ctx.cfg, feats, args.seed)
        for qs_id, probe in probes.items():
            pl.save_probe(probe, d / f"{qs_id}.safetensors")
        (d / "metrics.jsonl").write_text("".join(
            json.dumps({"qs": qs_id, **row.row()}, sort_keys=True) + "\n"
            for qs_id, rep in metrics.items() for row in rep.rows))
        info["outputs"] = {qs: rep.macro_f1 for qs, rep in metrics.items()}
    for qs, rep in metrics.items():
        print(f"{qs} probe macro-F1 {rep.macro_f1:.4f}")


def cmd_pretrain(ctx: Context, args) -> None:
    feats = ctx.features()
    with ctx.store.record(f"decoder-s{args.seed}", "pretrain-decoder", seed=args.seed) as (d, info):
        res = pl.pretrain(ctx.cfg, feats, args.seed)
        pl.save_decoder(res, d / "decoder.safetensors")
        info["outputs"] = {"heldout_ppl": res.heldout_ppl}
    print(f"held-out perplexity {res.heldout_ppl:.4f}")


def _ensure_stage1(ctx: Context, seed: int, decoder):
    name = f"stage1-s{seed}"
    if not ctx.store.exists(name):
        with ctx.store.record(name, "train-vlm", seed=seed, stage=1) as (d, info):
            proj, trace = pl.stage1(ctx.cfg, ctx.features(), decoder, seed)
            pl.save_projector(proj, trace, d / "projector.safetensors")
    return pl.load_projector(ctx.store.path(name) / "projector.safetensors")[0]


def train_vlm(ctx: Context, p: float, seed: int, no_image: bool) -> str:
    cfg = ctx.cfg
    train_cue = cfg["train.cue_source"]
    name = pl.vlm_name(p, seed, no_image, train_cue)
    decoder = ctx.decoder(seed)
    proj = None if no_image else _ensure_stage1(ctx, seed, decoder)
    probes = ctx.probes() if train_cue == "probe" else None
    with ctx.store.record(name, "train-vlm", seed=seed, dropout=p, no_image=no_image,
                          train_cue=train_cue) as (d, info):
        vlm = pl.stage2(cfg, ctx.features(), decoder, proj, p, seed, no_image, train_cue, probes)
        pl.save_vlm(vlm, d / "model.safetensors")
        info["outputs"] = {"final_loss": vlm.stage2_trace[-1] if vlm.stage2_trace else None}
    return name


def cmd_train_vlm(ctx: Context, args) -> None:
    p = ctx.cfg["train.dropout"] if args.dropout is None else args.dropout
    print(f"wrote {ctx.store.path(train_vlm(ctx, p, args.seed, args.no_image))}")


def eval_name(model: str, setting: str) -> str:
    return f"eval-{model}-{setting}"


def run_eval(ctx: Context, p: float, seed: int, no_image: bool, source: str, flip: Optional[float]) -> str:
    vlm = ctx.vlm(p, seed, no_image)
    if source == "noisy" and flip is None:
        flip = ctx.cfg["eval.noisy_flip"]
    name = eval_name(vlm.name, pl.setting_label(source, flip))
    probes = ctx.probes() if source == "probe" else None
    with ctx.store.record(name, "evaluate", model=vlm.name, cue_source=source, flip=flip) as (d, info):
        res = pl.evaluate(ctx.cfg, ctx.features(), vlm, source, probes, flip)
        pl.write_generations(res, vlm, d)
        (d / "metrics.jsonl").write_text(pl.metrics_jsonl(res, vlm.name))
        (d / "hierarchy.csv").write_text(res.hierarchy.csv())
        info["outputs"] = {qs: res.macro_f1(qs) for qs in res.metrics}
    return name


def cmd_evaluate(ctx: Context, args) -> None:
    p = ctx.cfg["train.dropout"] if args.dropout is None else args.dropout
    source = args.cue_source or ctx.cfg["eval.cue_source"]
    name = run_eval(ctx, p, args.seed, args.no_image, source, args.flip)
    print(f"wrote {ctx.store.path(name)}")
    for line in (ctx.store.path(name) / "metrics.jsonl").read_text().splitlines():
        row = json.loads(line)
        if row.get("question") == "__macro__":
            print(f"{row['qs']} macro-F1 {row['f1']:.4f}")


def cmd_reliance(ctx: Context, args) -> None:
    evals = ctx.store.records("eval-")
    if args.model:
        evals = [e for e in evals if e.startswith(f"eval-{args.model}-")]
    if not evals:
        raise MissingArtifactError(ctx.store.dir / "eval-*", "evaluate")
    summaries = []
    for e in evals:
        d = ctx.store.path(e)
        gens = [json.loads(line) for line in (d / "generations.jsonl").read_text().splitlines()]
        try:
            summaries.append(reliance_report([load_trace(d / g["trace_file"]) for g in gens], e[len("eval-"):]))
        except RelianceError as exc:
            print(f"skipping {e}: {exc}", file=sys.stderr)
    name = ctx.store.next_name("reliance")
    with ctx.store.record(name, "reliance", evals=evals) as (d, info):
        (d / "summary.csv").write_text(summary_csv(summaries))
    print((ctx.store.path(name) / "summary.csv").read_text(), end="")


def cmd_ablate(ctx: Context, args) -> None:
    rates = [float(x) for x in args.dropout.split(",")] if args.dropout else [ctx.cfg["train.dropout"]]
    seeds = [args.seed] if args.seed is not None else list(ctx.cfg["seeds"])
    settings = [(src, ctx.cfg["eval.noisy_flip"] if src == "noisy" else None) for src, _ in TEST_SETTINGS]
    cells = []
    for seed in seeds:
        for p in rates:
            model = pl.vlm_name(p, seed, args.no_image, ctx.cfg["train.cue_source"])
            if not ctx.store.exists(model):
                train_vlm(ctx, p, seed, args.no_image)
            for src, flip in settings:
                name = eval_name(model, pl.setting_label(src, flip))
                if not ctx.store.exists(name):
                    run_eval(ctx, p, seed, args.no_image, src, flip)
                cells.append((p, seed, src, name))
    out = ctx.store.next_name("ablate")
    with ctx.store.record(out, "ablate", dropout=rates, seeds=seeds) as (d, info):
        csv_text = tables.ablation_csv(ctx.store, cells)
        (d / "ablation.csv").write_text(csv_text)
        info["outputs"] = {"rows": csv_text.count("\n") - 1}
    print(csv_text, end="")


def cmd_report_tables(ctx: Context, args) -> None:
    files = tables.report_tables(ctx.store)
    if args.out:
        out = Path(args.out)
        if out.exists() and any(out.iterdir()):
            raise RunExistsError(f"{out} is not empty; report tables are never written over existing files")
        out.mkdir(parents=True, exist_ok=True)
        for fname, text in files.items():
            (out / fname).write_text(text)
        print(f"wrote {len(files)} tables to {out}")
        return
    name = ctx.store.next_name("tables")
    with ctx.store.record(name, "report-tables") as (d, info):
        for fname, text in files.items():
            (d / fname).write_text(text)
    print(f"wrote {len(files)} tables to {ctx.store.path(name)}")


# -- parser -------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcppd", description=__doc__)
    ap.add_argument("--config", help="JSON config file with flat dotted keys")
    ap.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    ap.add_argument("--runs", help="run root (overrides output_dir)")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="phantoms, reports and frozen backbone features").set_defaults(fn=cmd_gen_data)
    sp = sub.add_parser("train-probe", help="linear probes per question set")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_train_probe)

    sp = sub.add_parser("pretrain-decoder", help="text-only decoder pretraining")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_pretrain)

    def model_args(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--dropout", type=float, help="prompt dropout rate (default: train.dropout)")
        sp.add_argument("--no-image", action="store_true", help="cue-only generator without image tokens")

    sp = sub.add_parser("train-vlm", help="projector alignment, then cue-conditioned fine-tuning")
    model_args(sp)
    sp.set_defaults(fn=cmd_train_vlm)

    sp = sub.add_parser("evaluate", help="generate under one test-time cue setting and score")
    model_args(sp)
    sp.add_argument("--cue-source", choices=CUE_SOURCES)
    sp.add_argument("--flip", type=float, help="flip rate for --cue-source noisy")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("reliance", help="attention reliance summary over evaluation traces")
    sp.add_argument("--model", help="restrict to one model record, e.g. vlm-p0.3-s0")
    sp.set_defaults(fn=cmd_reliance)

    sp = sub.add_parser("ablate", help="dropout-rate x test-setting grid")
    sp.add_argument("--dropout", help="comma-separated rates, e.g. 0,0.1,0.3,0.5,0.7")
    sp.add_argument("--seed", type=int, help="single seed (default: all config seeds)")
    sp.add_argument("--no-image", action="store_true")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("report-tables", help="join run records into CSV tables")
    sp.add_argument("--out", help="write into this (empty) directory instead of a new record")
    sp.set_defaults(fn=cmd_report_tables)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = Context(args)
        args.fn(ctx, args)
    except (ConfigError, MissingArtifactError, RunExistsError, dio.ArtifactError, ValueError) as exc:
        print(f"dcppd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
