"""In-memory experiment steps shared by the CLI, the demos and the test-suite.

Each step takes an :class:`ExperimentConfig` plus upstream results and is
deterministic given the config and seed. Artifact (de)serialization for the
run store lives at the bottom of the module.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .. import io as dio
from ..backbone import Backbone, pool_embedding
from ..cueprompt import template
from ..discriminator import LinearProbe, MetricsReport, evaluate_probe, predict, simulate_cue_source, train_probe
from ..evalproto import AnswerCache, agreement_metrics, corpus_bleu_mean, extract_generated, hierarchy_analysis
from ..evalproto.metrics import HierarchyReport
from ..generator import (
    Decoder,
    DecoderConfig,
    GenData,
    ProjectorConfig,
    VisionProjector,
    decoder_checksum,
    generate,
    pretrain_decoder,
    train_stage1,
    train_stage2,
)
from ..generator.training import PretrainResult, cue_entities
from ..questions import QS_ORDER, LabelVector, default_sets
from ..reliance import RelianceError, RelianceSummary, reliance_report, save_trace
from ..synthdata import Dataset, make_dataset
from .config import ExperimentConfig

# -- data and frozen features ----------------------------------------------------------------


@dataclass
class Features:
    """Dataset plus frozen-backbone outputs; rows ``[0, n_train)`` train, the rest evaluate."""

    dataset: Dataset
    embeddings: np.ndarray  # [N, E]
    visual: torch.Tensor  # [N, T, C_in]
    n_train: int

    @property
    def train_idx(self) -> range:
        return range(self.n_train)

    @property
    def eval_idx(self) -> range:
        return range(self.n_train, len(self.dataset))

    def labels(self, idx) -> list[dict]:
        return [self.dataset[i].gt.labels() for i in idx]

    def label_matrix(self, qs_id: str, idx) -> np.ndarray:
        return np.stack([self.dataset[i].gt.labels()[qs_id].values for i in idx]).astype(np.int8)

    def gen_data(self, idx) -> GenData:
        idx = list(idx)
        return GenData(self.visual[idx], [self.dataset[i].report.flat_text for i in idx], self.labels(idx),
                       [self.dataset[i].id for i in idx])


def make_data(cfg: ExperimentConfig) -> Dataset:
    return make_dataset(cfg["data.n_train"] + cfg["data.n_eval"], cfg["data.seed"], cfg.dataset_config())


@torch.no_grad()
def encode(dataset: Dataset, cfg: ExperimentConfig, batch: int = 50) -> tuple[np.ndarray, torch.Tensor]:
    """Multi-scale embeddings and projector-side visual tokens from the frozen backbone."""
    bb = Backbone(cfg.backbone_config()).eval()
    emb, vis = [], []
    for s in range(0, len(dataset), batch):
        vol = torch.from_numpy(np.stack([dataset.volume(i).data for i in range(s, min(s + batch, len(dataset)))]))
        staged = bb(vol)
        emb.append(pool_embedding(staged).vector.numpy())
        vis.append(bb.visual_tokens(staged, cfg["backbone.visual_scale"]))
    return np.concatenate(emb).astype(np.float32), torch.cat(vis).float()


def build_features(cfg: ExperimentConfig, dataset: Optional[Dataset] = None) -> Features:
    dataset = dataset or make_data(cfg)
    emb, vis = encode(dataset, cfg)
    return Features(dataset, emb, vis, cfg["data.n_train"])


# -- probes -----------------------------------------------------------------------------------


def fit_probes(cfg: ExperimentConfig, feats: Features, seed: int = 0,
               sets: Sequence[str] = QS_ORDER) -> tuple[dict, dict]:
    """One linear probe per question set; returns ``(probes, eval metrics)``."""
    probes, metrics = {}, {}
    qsets = feats.dataset[0].gt.labels()
    tr, ev = list(feats.train_idx), list(feats.eval_idx)
    for qs_id in sets:
        qs = qsets[qs_id].qs
        probe = train_probe(feats.embeddings[tr], feats.label_matrix(qs_id, tr), qs, cfg.probe_optim(seed))
        probes[qs_id] = probe
        metrics[qs_id] = evaluate_probe(probe, feats.embeddings[ev], feats.label_matrix(qs_id, ev))
    return probes, metrics


# -- cue sources ------------------------------------------------------------------------------


def cue_labels(source: str, feats: Features, idx, cue_sets: Sequence[str], probes: Optional[dict] = None,
               flip: float = 0.1, seed: int = 0) -> Optional[list[dict]]:
    """Per-sample label dicts feeding cue prompts; ``None`` for the empty-cue setting.

    ``gt`` copies ground truth, ``probe`` thresholds the trained probes and
    ``noisy`` flips ground-truth entries independently at rate ``flip``.
    """
    idx = list(idx)
    if source == "none":
        return None
    truth = feats.labels(idx)
    if source == "gt":
        return truth
    out = [dict(t) for t in truth]
    for k, qs_id in enumerate(cue_sets):
        qs = truth[0][qs_id].qs
        if source == "probe":
            if not probes or qs_id not in probes:
                raise ValueError(f"probe cues need a trained {qs_id} probe")
            values, _ = predict(probes[qs_id], feats.embeddings[idx])
        elif source == "noisy":
            values = simulate_cue_source(feats.label_matrix(qs_id, idx), flip, [seed, 0xC0E, k])
        else:
            raise ValueError(f"unknown cue source {source!r}")
        for row, v in zip(out, np.asarray(values)):
            row[qs_id] = LabelVector(qs, np.asarray(v, dtype=np.int8))
    return out


def cue_prompts(labels: Optional[list[dict]], n: int, cue_sets: Sequence[str], source: str) -> list:
    if labels is None:
        return [template([], source="none")] * n
    source = "GT" if source == "gt" else source
    return [template(cue_entities(lab, cue_sets), source=source) for lab in labels]


# -- generator training ---------------------------------------------------------------------------


@dataclass
class VLM:
    decoder: Decoder
    projector: Optional[VisionProjector]
    dropout: float
    no_image: bool
    seed: int
    train_cue: str = "gt"
    base_checksum: str = ""
    stage1_trace: list = field(default_factory=list)
    stage2_trace: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return vlm_name(self.dropout, self.seed, self.no_image, self.train_cue)


def vlm_name(p: float, seed: int, no_image: bool = False, train_cue: str = "gt") -> str:
    tag = f"vlm-p{p:g}-s{seed}"
    if train_cue != "gt":
        tag += f"-train{train_cue}"
    return tag + ("-noimg" if no_image else "")


def pretrain(cfg: ExperimentConfig, feats: Features, seed: int) -> PretrainResult:
    return pretrain_decoder([feats.dataset[i].report.flat_text for i in feats.train_idx], cfg.gen_config(seed))


def new_projector(cfg: ExperimentConfig, feats: Features, decoder: Decoder, seed: int) -> VisionProjector:
    return VisionProjector(ProjectorConfig(c_in=feats.visual.shape[-1], d_model=decoder.config.d_model,
                                           n_queries=cfg["gen.n_queries"], seed=seed))


def stage1(cfg: ExperimentConfig, feats: Features, decoder: Decoder, seed: int) -> tuple[VisionProjector, list]:
    proj = new_projector(cfg, feats, decoder, seed)
    res = train_stage1(decoder, proj, feats.gen_data(feats.train_idx), cfg.gen_config(seed))
    return proj, res.loss_trace


def stage2(cfg: ExperimentConfig, feats: Features, decoder: Decoder, projector: Optional[VisionProjector],
           p: float, seed: int, no_image: bool = False, train_cue: str = "gt",
           probes: Optional[dict] = None) -> VLM:
    """Fine-tune copies of the pretrained decoder and the stage-1 projector.

    The no-image variant starts from a fresh projector that is never used,
    so its prompts are ``[cue ; query]`` only.
    """
    gcfg = cfg.gen_config(seed, no_image=no_image)
    dec = copy.deepcopy(decoder)
    proj = copy.deepcopy(projector) if projector is not None else new_projector(cfg, feats, decoder, seed)
    base = decoder_checksum(dec)
    labels = None
    if train_cue != "gt":
        labels = cue_labels(train_cue, feats, feats.train_idx, gcfg.cue_sets, probes, cfg["train.noisy_flip"],
                            seed)
    res = train_stage2(dec, proj, feats.gen_data(feats.train_idx), p, labels, gcfg)
    return VLM(dec, None if no_image else proj, p, no_image, seed, train_cue, base, stage2_trace=res.loss_trace)


# -- evaluation -----------------------------------------------------------------------------------


@dataclass
class EvalResult:
    setting: str
    flip: Optional[float]
    ids: list
    generations: list
    references: list
    metrics: dict  # qs id -> MetricsReport
    bleu: float
    hierarchy: HierarchyReport
    reliance: Optional[RelianceSummary]
    unparsed: int

    def macro_f1(self, qs_id: str = "QS1") -> float:
        return self.metrics[qs_id].macro_f1


def setting_label(source: str, flip: Optional[float] = None) -> str:
    return f"noisy{flip:g}" if source == "noisy" else source


def evaluate(cfg: ExperimentConfig, feats: Features, vlm: VLM, source: str, probes: Optional[dict] = None,
             flip: Optional[float] = None, n: Optional[int] = None, cache: Optional[AnswerCache] = None) -> EvalResult:
    """Generate for the first ``n`` eval phantoms under one test-time cue setting and score them."""
    n = n or cfg["eval.n"]
    idx = list(feats.eval_idx)[:n]
    flip = cfg["eval.noisy_flip"] if flip is None and source == "noisy" else flip
    cue_sets = cfg["gen.cue_sets"]
    labels = cue_labels(source, feats, idx, cue_sets, probes, flip if flip is not None else 0.0, vlm.seed)
    cues = cue_prompts(labels, len(idx), cue_sets, source)
    visual = None if vlm.no_image else feats.visual[idx]
    gens = generate(vlm.decoder, vlm.projector, visual, cues, max_len=cfg["gen.max_len"],
                    batch_size=cfg["eval.batch_size"])
    ids = [feats.dataset[i].id for i in idx]
    refs = [feats.dataset[i].report.flat_text for i in idx]
    pred_reports = {i: g.report for i, g in zip(ids, gens)}
    ref_reports = dict(zip(ids, refs))
    cache = cache or AnswerCache()
    sets = cache.sets
    metrics = {qs: agreement_metrics(pred_reports, ref_reports, sets[qs], cache) for qs in QS_ORDER}
    extracted, unparsed = extract_generated([g.report for g in gens], sets)
    hier = hierarchy_analysis(metrics["QS1"], metrics["QS2"], metrics["QS3"], extracted)
    label = setting_label(source, flip)
    rel = None
    if not vlm.no_image:
        try:
            rel = reliance_report([g.trace for g in gens], f"{vlm.name}/{label}")
        except RelianceError:
            rel = None
    return EvalResult(label, flip, ids, gens, refs, metrics, corpus_bleu_mean([g.report for g in gens], refs), hier,
                      rel, unparsed)


# -- artifacts ------------------------------------------------------------------------------------


def save_features(feats: Features, path: Path) -> None:
    dio.save_tensors(path, {"embeddings": feats.embeddings, "visual": feats.visual.numpy()},
                     {"n_train": feats.n_train, "ids": [it.id for it in feats.dataset.items]})


def load_features(dataset: Dataset, path: Path) -> Features:
    tensors, header = dio.load_tensors(path)
    if header["ids"] != [it.id for it in dataset.items]:
        raise dio.ArtifactError(f"{path} does not match the dataset it sits next to")
    return Features(dataset, tensors["embeddings"], torch.from_numpy(tensors["visual"]), header["n_train"])


def save_probe(probe: LinearProbe, path: Path) -> None:
    tensors, header = probe.to_tensors()
    tensors = {**tensors, "weights": probe.weights, "bias": probe.bias}  # keep float64 for exact reload
    dio.save_tensors(path, tensors, {**header, "loss_trace": probe.loss_trace})


def load_probe(path: Path) -> LinearProbe:
    tensors, header = dio.load_tensors(path)
    qs = default_sets()[header["qs"]]
    if list(qs.questions) != header["questions"]:
        raise dio.ArtifactError(f"{path}: question list differs from {qs.id}")
    return LinearProbe(tensors["weights"], tensors["bias"], tensors["thresholds"].astype(np.float64), qs,
                       np.array(header["excluded"], dtype=bool), header["loss_trace"])


def save_decoder(res: PretrainResult, path: Path) -> None:
    dio.save_tensors(path, dio.state_dict_to_numpy(res.decoder.state_dict()),
                     {"decoder_config": res.decoder.config.to_dict(), "heldout_ppl": res.heldout_ppl,
                      "loss_trace": res.loss_trace, "checksum": decoder_checksum(res.decoder)})


def load_decoder(path: Path) -> Decoder:
    tensors, header = dio.load_tensors(path)
    dec = Decoder(DecoderConfig(**header["decoder_config"]))
    dec.load_state_dict(dio.numpy_to_state_dict(tensors))
    dec.eval()
    for p in dec.parameters():
        p.requires_grad_(False)
    if decoder_checksum(dec) != header["checksum"]:
        raise dio.ArtifactError(f"{path}: decoder checksum mismatch")
    return dec


def save_projector(proj: VisionProjector, trace: list, path: Path) -> None:
    dio.save_tensors(path, dio.state_dict_to_numpy(proj.state_dict()),
                     {"projector_config": proj.config.to_dict(), "loss_trace": trace})


def load_projector(path: Path) -> tuple[VisionProjector, list]:
    tensors, header = dio.load_tensors(path)
    proj = VisionProjector(ProjectorConfig(**header["projector_config"]))
    proj.load_state_dict(dio.numpy_to_state_dict(tensors))
    proj.eval()
    return proj, header["loss_trace"]


def save_vlm(vlm: VLM, path: Path) -> None:
    tensors = {f"decoder.{k}": v for k, v in dio.state_dict_to_numpy(vlm.decoder.state_dict()).items()}
    header = {"decoder_config": vlm.decoder.config.to_dict(), "lora_rank": vlm.decoder.adapter_rank,
              "lora_alpha": vlm.decoder.adapter_alpha, "dropout": vlm.dropout, "no_image": vlm.no_image,
              "seed": vlm.seed, "train_cue": vlm.train_cue, "base_checksum": vlm.base_checksum,
              "stage2_trace": vlm.stage2_trace}
    if vlm.projector is not None:
        tensors.update({f"projector.{k}": v for k, v in dio.state_dict_to_numpy(vlm.projector.state_dict()).items()})
        header["projector_config"] = vlm.projector.config.to_dict()
    dio.save_tensors(path, tensors, header)


def load_vlm(path: Path) -> VLM:
    tensors, h = dio.load_tensors(path)
    dec = Decoder(DecoderConfig(**h["decoder_config"]))
    dec.attach_adapters(h["lora_rank"], h["lora_alpha"])
    dec.load_state_dict(dio.numpy_to_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("decoder.")}))
    for p in dec.parameters():
        p.requires_grad_(False)
    dec.eval()
    if decoder_checksum(dec) != h["base_checksum"]:
        raise dio.ArtifactError(f"{path}: base decoder checksum mismatch")
    proj = None
    if "projector_config" in h:
        proj = VisionProjector(ProjectorConfig(**h["projector_config"]))
        proj.load_state_dict(dio.numpy_to_state_dict({k[10:]: v for k, v in tensors.items()
                                                      if k.startswith("projector.")}))
        proj.eval()
    return VLM(dec, proj, h["dropout"], h["no_image"], h["seed"], h["train_cue"], h["base_checksum"],
               stage2_trace=h["stage2_trace"])


def metrics_jsonl(result: EvalResult, model: str) -> str:
    """One JSON line per (question set, question) plus one macro line per set; keys sorted."""
    lines = []
    for qs_id in QS_ORDER:
        rep: MetricsReport = result.metrics[qs_id]
        for row in rep.rows:
            lines.append({"model": model, "setting": result.setting, "qs": qs_id, **row.row()})
        lines.append({"model": model, "setting": result.setting, "qs": qs_id, "question": "__macro__",
                      "precision": rep.macro_precision, "recall": rep.macro_recall, "f1": rep.macro_f1})
    lines.append({"model": model, "setting": result.setting, "bleu_mean": result.bleu,
                  "consistency": result.hierarchy.consistency, "unparsed_sentences": result.unparsed,
                  "mean_S_text": result.reliance.mean_s_text if result.reliance else None,
                  "std_S_text": result.reliance.std_s_text if result.reliance else None})
    return "".join(json.dumps(d, sort_keys=True) + "\n" for d in lines)


def write_generations(result: EvalResult, vlm: VLM, out_dir: Path) -> None:
    """``generations.jsonl`` plus one attention trace file per generation under ``traces/``."""
    (out_dir / "traces").mkdir(parents=True, exist_ok=True)
    lines = []
    for rid, g in zip(result.ids, result.generations):
        trace_file = f"traces/{rid}.safetensors"
        save_trace(g.trace, out_dir / trace_file)
        source = "GT" if result.setting == "gt" else result.setting
        lines.append(json.dumps({"id": rid, "cue_source": source, "dropout_rate": vlm.dropout,
                                 "report": g.report, "truncated": g.truncated, "trace_file": trace_file},
                                sort_keys=True))
    (out_dir / "generations.jsonl").write_text("".join(line + "\n" for line in lines))
