"""Prompt assembly, decoder pretraining, the two training stages and greedy generation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .. import grammar
from ..cueprompt import CuePrompt, labels_to_entities, prompt_dropout, template
from ..io import tensor_checksum
from ..reliance import AttentionTrace
from .model import Decoder, DecoderConfig, ProjectorConfig, VisionProjector
from .tokenizer import IMG, Vocabulary, default_vocab


class GeneratorDivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"training loss became non-finite ({loss}) at step {step}")


class PretrainQualityError(RuntimeError):
    pass


class FreezeViolation(AssertionError):
    pass


@dataclass
class GenConfig:
    batch_size: int = 32
    pretrain_epochs: int = 12
    pretrain_lr: float = 2e-3
    ppl_threshold: float = 3.0
    holdout_fraction: float = 0.1
    stage1_epochs: int = 8
    stage1_lr: float = 1e-3
    stage2_epochs: int = 10
    stage2_lr: float = 1e-3
    lora_rank: int = 16
    lora_alpha: float = 32.0
    cue_sets: tuple = ("QS1",)
    max_len: int = 64
    no_image: bool = False
    seed: int = 0
    log_masks: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cue_sets"] = list(self.cue_sets)
        return d


@dataclass
class GenData:
    """Aligned generator inputs: frozen visual tokens, reference reports and labels."""

    visual: Optional[torch.Tensor]  # [N, N_tok, C_in]
    reports: list[str]
    labels: list[dict]  # qs id -> LabelVector
    ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.reports)

    def subset(self, idx) -> "GenData":
        idx = list(idx)
        vis = self.visual[idx] if self.visual is not None else None
        ids = [self.ids[i] for i in idx] if self.ids else []
        return GenData(vis, [self.reports[i] for i in idx], [self.labels[i] for i in idx], ids)


# -- prompt sequences -------------------------------------------------------------------


@dataclass
class PromptSequence:
    embeds: Optional[torch.Tensor]  # [S, d_model]
    token_ids: list[int]  # image slots hold the <img> id
    r_image: tuple[int, ...]
    r_text: tuple[int, ...]
    r_query: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"token_ids": list(self.token_ids), "n_image": len(self.r_image),
                "n_text": len(self.r_text), "n_query": len(self.r_query)}

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSequence":
        m, t, q = d["n_image"], d["n_text"], d["n_query"]
        return cls(None, list(d["token_ids"]), tuple(range(m)), tuple(range(m, m + t)),
                   tuple(range(m + t, m + t + q)))


def _regions(m: int, t: int, q: int):
    return tuple(range(m)), tuple(range(m, m + t)), tuple(range(m + t, m + t + q))


def assemble_prompt(t_img: Optional[torch.Tensor], cue: Optional[CuePrompt], query_text: str = grammar.QUERY_TEXT,
                    decoder: Optional[Decoder] = None, vocab: Optional[Vocabulary] = None) -> PromptSequence:
    """Concatenate image tokens, cue tokens and query tokens in that order.

    ``t_img=None`` drops the image region; ``cue=None`` drops the cue region
    (distinct from the empty-cue sentinel, which still occupies tokens).
    Embeddings are filled in only when a decoder is given.
    """
    vocab = vocab or default_vocab()
    m = 0 if t_img is None else t_img.shape[0]
    cue_ids = vocab.encode(cue.text) if cue is not None else []
    q_ids = vocab.encode(query_text)
    ids = [vocab.ids[IMG]] * m + cue_ids + q_ids
    embeds = None
    if decoder is not None:
        text = decoder.embed(torch.tensor(ids[m:], dtype=torch.long))
        embeds = text if t_img is None else torch.cat([t_img.to(text.dtype), text], dim=0)
    return PromptSequence(embeds, ids, *_regions(m, len(cue_ids), len(q_ids)))


# -- batching ---------------------------------------------------------------------------


class _Encoder:
    """Caches token ids of reports, cue texts and the query."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.query = vocab.encode(grammar.QUERY_TEXT)
        self._cache: dict = {}

    def ids(self, text: str) -> list[int]:
        if text not in self._cache:
            self._cache[text] = self.vocab.encode(text)
        return self._cache[text]


def _pad_right(rows: list[list[int]], pad: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), pad, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.bool)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = torch.tensor(r, dtype=torch.long)
        mask[i, :len(r)] = True
    return ids, mask


def lm_batch_loss(decoder: Decoder, projector: Optional[VisionProjector], visual: Optional[torch.Tensor],
                  prefixes: list[list[int]], reports: list[list[int]], n_image: int, vocab: Vocabulary) -> torch.Tensor:
    """Mean next-token loss over report tokens and EOS given ``[image ; prefix ; BOS]``."""
    rows, starts = [], []
    for pre, rep in zip(prefixes, reports):
        starts.append(n_image + len(pre))  # BOS position
        rows.append(pre + [vocab.bos_id] + rep + [vocab.eos_id])
    ids, mask = _pad_right(rows, vocab.pad_id)
    emb = decoder.embed(ids)
    if n_image:
        img = projector(visual)
        emb = torch.cat([img, emb], dim=1)
        mask = torch.cat([torch.ones(len(rows), n_image, dtype=torch.bool), mask], dim=1)
    targets = torch.full(mask.shape, -100, dtype=torch.long)
    for i, (s, r) in enumerate(zip(starts, rows)):
        end = n_image + len(r) - 1
        targets[i, s:end] = ids[i, s - n_image + 1:len(r)]
    logits = decoder(embeds=emb, key_mask=mask)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


def _optimize(params, batches, epochs: int, lr: float, gen: torch.Generator, n: int, batch_size: int, trace: list,
              on_epoch=None):
    optim = torch.optim.Adam(params, lr=lr)
    step = len(trace)
    for epoch in range(epochs):
        if on_epoch is not None:
            on_epoch(epoch)
        order = torch.randperm(n, generator=gen).tolist()
        for start in range(0, n, batch_size):
            loss = batches(order[start:start + batch_size])
            if not torch.isfinite(loss):
                raise GeneratorDivergenceError(step, float(loss))
            optim.zero_grad()
            loss.backward()
            optim.step()
            trace.append(loss.item())
            step += 1
    return trace


# -- pretraining ------------------------------------------------------------------------


@dataclass
class PretrainResult:
    decoder: Decoder
    loss_trace: list
    heldout_ppl: float


def pretrain_decoder(corpus: Sequence[str], cfg: Optional[GenConfig] = None, vocab: Optional[Vocabulary] = None,
                     decoder_config: Optional[DecoderConfig] = None, check_ppl: bool = True) -> PretrainResult:
    """Next-token training on report text alone; checks held-out perplexity afterwards."""
    cfg = cfg or GenConfig()
    vocab = vocab or default_vocab()
    corpus = list(corpus)
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    dcfg = decoder_config or DecoderConfig(vocab_size=len(vocab), seed=cfg.seed)
    decoder = Decoder(dcfg)
    enc = _Encoder(vocab)
    n_hold = int(len(corpus) * cfg.holdout_fraction) if len(corpus) > 1 else 0
    train, held = corpus[:len(corpus) - n_hold], corpus[len(corpus) - n_hold:]
    gen = torch.Generator().manual_seed(cfg.seed)

    def batch(idx):
        return lm_batch_loss(decoder, None, None, [[]] * len(idx), [enc.ids(train[i]) for i in idx], 0, vocab)

    decoder.train()
    trace = _optimize(decoder.parameters(), batch, cfg.pretrain_epochs, cfg.pretrain_lr, gen, len(train),
                      cfg.batch_size, [])
    decoder.eval()
    ppl = float("nan")
    if held:
        with torch.no_grad():
            losses = [float(lm_batch_loss(decoder, None, None, [[]] * len(held[s:s + 64]),
                                          [enc.ids(t) for t in held[s:s + 64]], 0, vocab)) * len(held[s:s + 64])
                      for s in range(0, len(held), 64)]
        ppl = math.exp(sum(losses) / len(held))
        if check_ppl and ppl > cfg.ppl_threshold:
            raise PretrainQualityError(f"held-out perplexity {ppl:.3f} above threshold {cfg.ppl_threshold}")
    for p in decoder.parameters():
        p.requires_grad_(False)
    return PretrainResult(decoder, trace, ppl)


# -- stage training -----------------------------------------------------------------------


def decoder_checksum(decoder: Decoder) -> str:
    return tensor_checksum(decoder.base_state())


@dataclass
class StageResult:
    loss_trace: list
    mask_log: list = field(default_factory=list)


def train_stage1(decoder: Decoder, projector: VisionProjector, data: GenData, cfg: Optional[GenConfig] = None,
                 vocab: Optional[Vocabulary] = None) -> StageResult:
    """Align the projector with the frozen decoder on ``[T_img ; query]`` prompts (no cues)."""
    cfg = cfg or GenConfig()
    vocab = vocab or default_vocab()
    if cfg.no_image:
        return StageResult([])
    enc = _Encoder(vocab)
    before = decoder_checksum(decoder)
    for p in decoder.parameters():
        p.requires_grad_(False)
    m = projector.config.n_queries
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    def batch(idx):
        return lm_batch_loss(decoder, projector, data.visual[idx], [enc.query] * len(idx),
                             [enc.ids(data.reports[i]) for i in idx], m, vocab)

    projector.train()
    trace = _optimize(list(projector.parameters()), batch, cfg.stage1_epochs, cfg.stage1_lr, gen, len(data),
                      cfg.batch_size, [])
    projector.eval()
    if decoder_checksum(decoder) != before:
        raise FreezeViolation("stage 1 changed decoder weights")
    return StageResult(trace)


def cue_entities(labels: dict, cue_sets: Sequence[str]):
    return labels_to_entities(*[labels[qs] for qs in cue_sets])


def train_stage2(decoder: Decoder, projector: VisionProjector, data: GenData, p: float,
                 cue_labels: Optional[list] = None, cfg: Optional[GenConfig] = None,
                 vocab: Optional[Vocabulary] = None) -> StageResult:
    """Cue-conditioned fine-tuning of projector and adapters with prompt dropout.

    ``cue_labels`` holds per-sample label dicts from the training cue source;
    ground truth is used when omitted. Each entity is dropped with
    probability ``p``, freshly for every sample in every epoch, from a
    random stream separate from batch shuffling.
    """
    cfg = cfg or GenConfig()
    vocab = vocab or default_vocab()
    enc = _Encoder(vocab)
    cue_labels = cue_labels if cue_labels is not None else data.labels
    if not decoder.adapter_rank:
        decoder.attach_adapters(cfg.lora_rank, cfg.lora_alpha, seed=cfg.seed + 2)
    for p_ in decoder.parameters():
        p_.requires_grad_(False)
    adapters = decoder.adapter_parameters()
    for p_ in adapters:
        p_.requires_grad_(True)
    before = decoder_checksum(decoder)
    entities = [cue_entities(lab, cfg.cue_sets) for lab in cue_labels]
    drop_rng = np.random.default_rng([cfg.seed, 0xD0])
    gen = torch.Generator().manual_seed(cfg.seed + 3)
    current: list = [None] * len(data)
    mask_log: list = []
    m = 0 if cfg.no_image else projector.config.n_queries

    def on_epoch(epoch):
        keeps = []
        for i, ents in enumerate(entities):
            kept = prompt_dropout(ents, p, drop_rng)
            current[i] = enc.ids(template(kept).text) + enc.query
            if cfg.log_masks:
                keeps.append(tuple(e in kept for e in ents))
        if cfg.log_masks:
            mask_log.append(keeps)

    def batch(idx):
        vis = data.visual[idx] if m else None
        return lm_batch_loss(decoder, projector if m else None, vis, [current[i] for i in idx],
                             [enc.ids(data.reports[i]) for i in idx], m, vocab)

    params = adapters + (list(projector.parameters()) if m else [])
    decoder.train()
    projector.train()
    trace = _optimize(params, batch, cfg.stage2_epochs, cfg.stage2_lr, gen, len(data), cfg.batch_size, [], on_epoch)
    decoder.eval()
    projector.eval()
    for p_ in adapters:
        p_.requires_grad_(False)
    if decoder_checksum(decoder) != before:
        raise FreezeViolation("stage 2 changed base decoder weights")
    return StageResult(trace, mask_log)


# -- generation ---------------------------------------------------------------------------


@dataclass
class Generation:
    report: str
    trace: AttentionTrace
    truncated: bool
    token_ids: list


@torch.no_grad()
def generate(decoder: Decoder, projector: Optional[VisionProjector], visual: Optional[torch.Tensor],
             cues: Sequence[Optional[CuePrompt]], max_len: int = 64, vocab: Optional[Vocabulary] = None,
             batch_size: int = 64) -> list[Generation]:
    """Greedy decoding for a batch of prompts; stops at EOS or ``max_len`` tokens.

    Each trace row is the attention of the position emitting that token,
    averaged over heads and layers, restricted to prompt positions and
    renormalized to sum to 1.
    """
    vocab = vocab or default_vocab()
    decoder.eval()
    if projector is not None:
        projector.eval()
    out: list[Generation] = []
    n = len(cues)
    for s in range(0, n, batch_size):
        vis = visual[s:s + batch_size] if visual is not None and projector is not None else None
        out.extend(_generate_batch(decoder, projector, vis, list(cues[s:s + batch_size]), max_len, vocab))
    return out


def _generate_batch(decoder, projector, visual, cues, max_len, vocab):
    enc = _Encoder(vocab)
    B = len(cues)
    m = 0 if visual is None else projector.config.n_queries
    prefixes = [(enc.ids(c.text) if c is not None else []) + enc.query for c in cues]
    plen = [m + len(pre) for pre in prefixes]
    width = max(plen) + 1  # + BOS
    ids = torch.full((B, width), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros((B, width), dtype=torch.bool)
    img_slot = torch.zeros((B, width), dtype=torch.bool)
    for i, pre in enumerate(prefixes):
        off = width - plen[i] - 1
        ids[i, off + m:width - 1] = torch.tensor(pre, dtype=torch.long)
        ids[i, width - 1] = vocab.bos_id
        mask[i, off:] = True
        img_slot[i, off:off + m] = True
    img = projector(visual) if m else None
    done = torch.zeros(B, dtype=torch.bool)
    generated = [[] for _ in range(B)]
    rows = [[] for _ in range(B)]
    for _ in range(max_len):
        emb = decoder.embed(ids)
        if m:
            emb = emb.clone()
            emb[img_slot] = img.reshape(-1, img.shape[-1]).to(emb.dtype)
        logits, att = decoder(embeds=emb, key_mask=mask, return_attn=True)
        nxt = logits[:, -1].argmax(-1)
        for i in range(B):
            if done[i]:
                continue
            off = width - plen[i] - 1
            a = att[i, -1, off:off + plen[i]].double()
            rows[i].append((a / a.sum()).numpy())
            tok = int(nxt[i])
            generated[i].append(tok)
            if tok == vocab.eos_id:
                done[i] = True
        if bool(done.all()):
            break
        step_tok = torch.where(done, torch.full_like(nxt, vocab.pad_id), nxt)
        ids = torch.cat([ids, step_tok[:, None]], dim=1)
        img_slot = torch.cat([img_slot, torch.zeros(B, 1, dtype=torch.bool)], dim=1)
        # rows that already finished only append padding
        mask = torch.cat([mask, ~done[:, None]], dim=1)
    results = []
    for i in range(B):
        toks = generated[i]
        truncated = not toks or toks[-1] != vocab.eos_id
        body = toks[:-1] if not truncated else toks
        r_img, r_txt, r_qry = _regions(m, plen[i] - m - len(enc.query), len(enc.query))
        trace = AttentionTrace(np.stack(rows[i]), r_txt, r_img, r_qry)
        results.append(Generation(vocab.decode(body), trace, truncated, toks))
    return results


# -- assembly helpers ---------------------------------------------------------------------


def build_models(vocab_size: int, c_in: int, cfg: Optional[GenConfig] = None,
                 decoder_config: Optional[DecoderConfig] = None,
                 projector_config: Optional[ProjectorConfig] = None) -> tuple[Decoder, VisionProjector]:
    cfg = cfg or GenConfig()
    dec = Decoder(decoder_config or DecoderConfig(vocab_size=vocab_size, seed=cfg.seed))
    proj = VisionProjector(projector_config or ProjectorConfig(c_in=c_in, d_model=dec.config.d_model, seed=cfg.seed))
    return dec, proj
