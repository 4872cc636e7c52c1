"""End-to-end acceptance checks, one test per numbered criterion.

The trend criteria (4-7, 10) train the default configuration through the
``dcppd`` command line for seeds 0, 1 and 2 (about 15 minutes per seed on one
CPU core). Set ``DCPPD_ACCEPTANCE_RUNS`` to a directory to keep and reuse those
run records between sessions; records are keyed by the config hash.
"""
import copy
import itertools
import json
import os

import numpy as np
import pytest
import torch

from dcppd.backbone import Backbone, BackboneConfig, EncoderStage, hierarchy_shapes, large_preset, pool_embedding
from dcppd.cueprompt import labels_to_entities, prompt_dropout
from dcppd.discriminator import auroc, metrics_from_predictions, weighted_bce
from dcppd.evalproto import bleu, rule_extract
from dcppd.generator import (
    DecoderConfig,
    GenConfig,
    GenData,
    ProjectorConfig,
    VisionProjector,
    decoder_checksum,
    default_vocab,
    pretrain_decoder,
    train_stage1,
    train_stage2,
)
from dcppd.generator.model import DecoderBlock, rope_tables
from dcppd.harness import ExperimentConfig, RunStore
from dcppd.harness import pipeline as pl
from dcppd.harness.cli import main
from dcppd.harness.tables import read_eval
from dcppd.questions import LabelVector, QuestionSet, default_sets
from dcppd.reliance import load_trace, reliance_report, trace_reliance
from dcppd.synthdata import GroundTruth, make_dataset, render_report

import oracles
from test_synthdata import _all_finding_combos

SEEDS = (0, 1, 2)
P_DROP = 0.3


# -- 1-3: structural properties ------------------------------------------------------------------


def test_c01_round_trip(criterion):
    cfg = ExperimentConfig()
    eval_items = pl.make_data(cfg).items[cfg["data.n_train"]:]
    bad = sum(rule_extract(it.report.flat_text).labels != it.gt.labels() for it in eval_items)
    combos = 0
    for findings, structured in itertools.product(list(_all_finding_combos()), (True, False)):
        gt = GroundTruth.from_findings(findings)
        bad += rule_extract(render_report(gt, combos, structured=structured).flat_text).labels != gt.labels()
        combos += 1
    assert criterion(1, bad == 0, f"{len(eval_items)} eval reports + {combos} exhaustive renderings, {bad} mismatches")


def test_c02_shape_laws(criterion):
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(100):
        n_scales = int(rng.integers(1, 4))
        patch = tuple(int(x) for x in rng.choice([1, 2, 4], 3))
        strides = [tuple(int(x) for x in rng.choice([1, 2], 3)) for _ in range(n_scales - 1)]
        shape = [int(x) for x in rng.integers(1, 3, 3)]
        for s in reversed(strides):
            shape = [n * t for n, t in zip(shape, s)]
        volume = tuple(n * p for n, p in zip(shape, patch))
        heads = int(rng.choice([1, 2]))
        cfg = BackboneConfig(in_channels=1, patch=patch, c_in=6 * heads, strides=strides, n_scales=n_scales,
                             n_stages=n_scales, n_heads=heads, init="random")
        with torch.no_grad():
            staged = Backbone(cfg)(torch.rand(1, 1, *volume))
        want = hierarchy_shapes(volume, patch, strides, n_scales)
        ok = all(tuple(staged.get(ell, ell).shape[2:]) == want[ell - 1] for ell in range(1, n_scales + 1))
        ok &= pool_embedding(staged).vector.shape == (1, n_scales * cfg.c_in)
        checked += ok
    preset = large_preset()
    shapes = hierarchy_shapes((256, 256, 256), preset.patch, preset.strides, preset.n_scales)
    preset_ok = shapes == [(32, 32, 64), (4, 4, 64), (1, 1, 16)] and preset.n_scales * preset.c_in == 1152
    assert criterion(2, checked == 100 and preset_ok, f"{checked}/100 random configs, large preset {shapes}")


def test_c03_gradients(criterion):
    torch.manual_seed(0)
    bb = Backbone(BackboneConfig(in_channels=2, patch=(2, 2, 2), c_in=4, strides=[(2, 2, 2)], n_scales=2,
                                 n_stages=2, n_heads=2, init="random"))
    stage = EncoderStage(4, 2, 2)
    for p in stage.parameters():  # random residual paths so every branch carries gradient
        torch.nn.init.normal_(p, std=0.3)

    class Stage(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.stage = stage

        def forward(self, fine, coarse):
            pos = [torch.zeros_like(fine[:1]), torch.zeros_like(coarse[:1])]
            return tuple(self.stage([fine, coarse], pos, [(2, 2, 2)]))

    block = DecoderBlock(8, 2, 2)
    cos, sin = rope_tables(torch.arange(4)[None], 4, 10000.0)
    mask = torch.ones(4, 4, dtype=torch.bool).tril()[None]

    class Block(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.block = block

        def forward(self, x):
            return self.block(x, cos, sin, mask)[0]

    proj = VisionProjector(ProjectorConfig(c_in=4, d_model=8, n_queries=2, n_heads=2, hidden=8))
    y = (torch.rand(3, 2) > 0.5).double()
    z = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    w = torch.tensor([2.0, 0.5], dtype=torch.float64)
    results = {
        "stem": oracles.gradcheck_module(bb.stem, [torch.rand(1, 2, 4, 4, 4)]),
        "encoder stage": oracles.gradcheck_module(Stage(), [torch.rand(1, 4, 4, 4, 4), torch.rand(1, 4, 2, 2, 2)]),
        "projector": oracles.gradcheck_module(proj, [torch.randn(1, 3, 4)]),
        "decoder block": oracles.gradcheck_module(Block(), [torch.randn(1, 4, 8)]),
        "weighted BCE": torch.autograd.gradcheck(lambda t: weighted_bce(t, y, w), (z,), eps=1e-6, atol=1e-7,
                                                 rtol=1e-3),
    }
    assert criterion(3, all(results.values()), ", ".join(f"{k} ok" for k in results))


# -- 8, 9, 11: contracts and oracles ---------------------------------------------------------------


def test_c08_dropout_statistics(criterion):
    qs1 = default_sets()["QS1"]
    ents = labels_to_entities(LabelVector(qs1, np.ones(4, np.int8)))
    rng = np.random.default_rng(2024)
    rates = {}
    for p in (0.1, 0.3, 0.5, 0.7):
        kept = sum(len(prompt_dropout(ents, p, rng)) for _ in range(25_000))
        rates[p] = 1 - kept / 100_000
    exact = all(prompt_dropout(ents, 0.0, s) == ents and prompt_dropout(ents, 1.0, s) == [] for s in range(100))
    ok = exact and all(abs(r - p) <= 0.005 for p, r in rates.items())
    detail = ", ".join(f"p={p}: {r:.4f}" for p, r in rates.items())
    assert criterion(8, ok, f"{detail} over 100000 entity draws; endpoints exact={exact}")


def test_c09_freeze_and_adapter_contracts(criterion):
    ds = make_dataset(40, 3)
    reports = [it.report.flat_text for it in ds.items]
    dcfg = DecoderConfig(vocab_size=len(default_vocab()), d_model=32, n_blocks=2, n_heads=2)
    cfg = GenConfig(pretrain_epochs=1, stage1_epochs=1, stage2_epochs=1, batch_size=8, lora_rank=4)
    dec = pretrain_decoder(reports, cfg, decoder_config=dcfg, check_ppl=False).decoder
    proj = VisionProjector(ProjectorConfig(c_in=6, d_model=32, n_queries=2, n_heads=2, hidden=16))
    data = GenData(torch.randn(40, 5, 6, generator=torch.Generator().manual_seed(1)), reports,
                   [it.gt.labels() for it in ds.items])
    c0 = decoder_checksum(dec)
    train_stage1(dec, proj, data, cfg)
    c1 = decoder_checksum(dec)
    probe_batch = torch.randint(5, dcfg.vocab_size, (4, 12), generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        before = dec(probe_batch)
        adapted = copy.deepcopy(dec)
        adapted.attach_adapters(cfg.lora_rank, cfg.lora_alpha, seed=5)
        bitwise = torch.equal(before, adapted(probe_batch))
    train_stage2(adapted, proj, data, P_DROP, cfg=cfg)
    c2 = decoder_checksum(adapted)
    ok = c0 == c1 == c2 and bitwise
    assert criterion(9, ok, f"stage-1 checksum kept={c0 == c1}, stage-2 base checksum kept={c1 == c2}, "
                            f"zero-init logits bitwise equal={bitwise}")


def test_c11_metric_oracles(criterion):
    rng = np.random.default_rng(7)
    worst = {"prf": 0.0, "auroc": 0.0, "bleu": 0.0, "mean/std": 0.0}
    qs = QuestionSet("x", ("q",))
    for _ in range(200):
        n = int(rng.integers(2, 40))
        pred, truth = rng.integers(0, 2, n), rng.integers(0, 2, n)
        row = metrics_from_predictions(qs, pred[:, None], truth[:, None]).rows[0]
        ref = oracles.prf(pred, truth)
        worst["prf"] = max(worst["prf"], *(abs(a - b) for a, b in zip((row.precision, row.recall, row.f1), ref)))
        scores = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], n)
        if 0 < truth.sum() < n:
            worst["auroc"] = max(worst["auroc"], abs(auroc(scores, truth) - oracles.auroc_pairs(scores, truth)))
        cand, refw = list(rng.choice(list("abcde"), n)), list(rng.choice(list("abcdef"), int(rng.integers(1, 20))))
        worst["bleu"] = max(worst["bleu"], abs(bleu(cand, refw).mean - oracles.bleu_mean(cand, refw)))
        vals = list(rng.random(n))
        summ = reliance_report(vals)
        m, s = oracles.mean_std(vals)
        worst["mean/std"] = max(worst["mean/std"], abs(summ.mean_s_text - m), abs(summ.std_s_text - s))
    hand = (abs(bleu(["the", "cat", "sat"], ["the", "cat", "sat", "down"]).mean - 0.537398482930342) < 1e-9
            and abs(reliance_report([0.3, 0.5]).std_s_text - 0.14142135623730953) < 1e-12)
    ok = hand and worst["auroc"] < 1e-6 and all(worst[k] < 1e-9 for k in ("prf", "bleu", "mean/std"))
    assert criterion(11, ok, ", ".join(f"{k} max err {v:.1e}" for k, v in worst.items()) + f", hand fixtures={hand}")


# -- 12: determinism -------------------------------------------------------------------------------

TINY = {
    "data.n_train": 24, "data.n_eval": 8, "eval.n": 6, "eval.batch_size": 6, "probe.epochs": 5,
    "gen.pretrain_epochs": 1, "gen.ppl_threshold": 1e9, "gen.stage1_epochs": 1, "gen.stage2_epochs": 1,
    "gen.max_len": 6, "gen.batch_size": 8, "gen.lora_rank": 2, "gen.lora_alpha": 4.0, "seeds": [0],
}


def test_c12_report_tables_deterministic(criterion, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    tables = []
    for root in ("a", "b"):
        runs = str(tmp_path / root)
        for argv in (["gen-data"], ["train-probe"], ["pretrain-decoder"], ["ablate", "--dropout", "0,0.3"],
                     ["reliance"], ["report-tables", "--out", str(tmp_path / f"tables-{root}")]):
            assert main(["--config", str(cfg), "--runs", runs, *argv]) == 0
        tables.append({p.name: p.read_bytes() for p in sorted((tmp_path / f"tables-{root}").iterdir())})
    ok = tables[0] == tables[1] and len(tables[0]) == 6
    assert criterion(12, ok, f"{len(tables[0])} tables byte-identical across two fresh run roots: {ok}")


# -- 4-7, 10: trained trend runs --------------------------------------------------------------------


class Trends:
    """Default-config runs driven through the command line, with metric lookups."""

    def __init__(self, root):
        self.root = str(root)
        self.cfg = ExperimentConfig()
        self.store = RunStore(self.cfg, root)

    def run(self, record, *argv):
        if not self.store.exists(record):
            assert main(["--runs", self.root, *argv]) == 0, argv

    def eval_name(self, p, seed, no_image, setting):
        return f"eval-{pl.vlm_name(p, seed, no_image, 'gt')}-{setting}"

    def evaluate(self, p, seed, source, flip=None, no_image=False):
        setting = pl.setting_label(source, flip)
        argv = ["evaluate", "--seed", str(seed), "--dropout", f"{p:g}", "--cue-source", source]
        argv += ["--flip", f"{flip:g}"] if flip is not None else []
        argv += ["--no-image"] if no_image else []
        name = self.eval_name(p, seed, no_image, setting)
        self.run(name, *argv)
        return read_eval(self.store, name)

    def train(self, seed):
        self.run(f"decoder-s{seed}", "pretrain-decoder", "--seed", str(seed))
        for p, no_image in ((0.0, False), (P_DROP, False), (P_DROP, True)):
            argv = ["train-vlm", "--seed", str(seed), "--dropout", f"{p:g}"] + (["--no-image"] if no_image else [])
            self.run(pl.vlm_name(p, seed, no_image, "gt"), *argv)

    def f1(self, p, seed, source, flip=None, no_image=False, qs="QS1"):
        return self.evaluate(p, seed, source, flip, no_image)[qs]["f1"]


@pytest.fixture(scope="session")
def trends(tmp_path_factory):
    root = os.environ.get("DCPPD_ACCEPTANCE_RUNS") or tmp_path_factory.mktemp("acceptance-runs")
    t = Trends(root)
    t.run("data", "gen-data")
    t.run("probe", "train-probe")
    for seed in SEEDS:
        t.train(seed)
    return t


def _majority(flags):
    return sum(flags) >= 2


@pytest.mark.slow
def test_c04_probe_quality(criterion, trends):
    rec = json.loads((trends.store.path("probe") / "record.json").read_text())["outputs"]
    ok = rec["QS1"] >= 0.90 and rec["QS3"] < rec["QS1"]
    assert criterion(4, ok, f"probe macro-F1 QS1 {rec['QS1']:.3f}, QS2 {rec['QS2']:.3f}, QS3 {rec['QS3']:.3f}")


@pytest.mark.slow
def test_c05_shortcut_collapse(criterion, trends):
    flags, parts = [], []
    for s in SEEDS:
        none0, none3 = trends.f1(0.0, s, "none"), trends.f1(P_DROP, s, "none")
        gt0, gt3 = trends.f1(0.0, s, "gt"), trends.f1(P_DROP, s, "gt")
        flags.append(none0 <= 0.5 * none3 and gt0 >= 0.9 and gt3 >= 0.9)
        parts.append(f"s{s}: none {none0:.3f} vs {none3:.3f}, GT {gt0:.3f}/{gt3:.3f}")
    assert criterion(5, _majority(flags), f"{sum(flags)}/3 seeds; " + "; ".join(parts))


@pytest.mark.slow
def test_c06_cue_quality_monotone(criterion, trends):
    flags, parts = [], []
    for s in SEEDS:
        v = [trends.f1(P_DROP, s, "none"), trends.f1(P_DROP, s, "noisy", 0.3), trends.f1(P_DROP, s, "noisy", 0.1),
             trends.f1(P_DROP, s, "gt")]
        # endpoint comparisons strict, the middle one may tie
        flags.append(v[0] < v[1] <= v[2] < v[3])
        parts.append(f"s{s}: " + " <= ".join(f"{x:.3f}" for x in v))
    assert criterion(6, _majority(flags), f"{sum(flags)}/3 seeds; " + "; ".join(parts))


@pytest.mark.slow
def test_c07_reliance_direction(criterion, trends):
    s_text, exact, n = {}, True, {}
    for p in (0.0, P_DROP):
        values = []
        for s in SEEDS:
            name = trends.eval_name(p, s, False, "gt")
            trends.evaluate(p, s, "gt")
            d = trends.store.path(name)
            for line in (d / "generations.jsonl").read_text().splitlines():
                res = trace_reliance(load_trace(d / json.loads(line)["trace_file"]))
                exact &= res.s_text + res.s_image == 1.0
                values.append(res.s_text)
        s_text[p], n[p] = float(np.mean(values)), len(values)
    gap = s_text[0.0] - s_text[P_DROP]
    ok = gap >= 0.03 and exact and min(n.values()) >= 200
    assert criterion(7, ok, f"mean S_text p=0 {s_text[0.0]:.3f} vs p=0.3 {s_text[P_DROP]:.3f} (gap {gap:.3f}) "
                            f"over {n[0.0]} GT-cued generations each; S_text+S_image==1 on every trace: {exact}")


@pytest.mark.slow
def test_c10_no_image_ablation(criterion, trends):
    flags, parts = [], []
    for s in SEEDS:
        full = trends.evaluate(P_DROP, s, "gt")
        cue_only = trends.evaluate(P_DROP, s, "gt", no_image=True)
        d1 = full["QS1"]["f1"] - cue_only["QS1"]["f1"]
        d3 = full["QS3"]["f1"] - cue_only["QS3"]["f1"]
        flags.append(abs(d1) <= 0.05 and d3 >= 0.10)
        parts.append(f"s{s}: dQS1 {d1:+.3f}, dQS3 {d3:+.3f}")
    assert criterion(10, _majority(flags), f"{sum(flags)}/3 seeds; " + "; ".join(parts))
