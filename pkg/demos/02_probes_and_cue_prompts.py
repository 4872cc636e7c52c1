"""From frozen volume features to a cue prompt, and what prompt dropout does to it.

A frozen multi-scale backbone turns each phantom into one pooled embedding.
Linear probes on that embedding answer the coarse (QS1) and lobe-level (QS3)
questions; coarse presence is the easier of the two. The probe's QS1 answers
become a short cue prompt. During training each listed finding is dropped
with probability p, so the generator cannot rely on the cue alone.

    python demos/02_probes_and_cue_prompts.py      # about a minute on one core
"""
import numpy as np

from dcppd.cueprompt import build_cue, labels_to_entities, prompt_dropout, template
from dcppd.discriminator import predict, simulate_cue_source
from dcppd.harness import ExperimentConfig
from dcppd.harness import pipeline as pl
from dcppd.questions import LabelVector

cfg = ExperimentConfig({"data.n_train": 600, "data.n_eval": 200, "eval.n": 200, "probe.epochs": 300})
feats = pl.build_features(cfg)
print("pooled embedding per phantom:", feats.embeddings.shape[1], "dims;",
      "visual tokens for the generator:", tuple(feats.visual.shape[1:]))

probes, metrics = pl.fit_probes(cfg, feats, seed=0, sets=("QS1", "QS3"))
for qs_id, rep in metrics.items():
    print(f"{qs_id} probe on held-out phantoms: macro-F1 {rep.macro_f1:.3f}, macro-AUROC {rep.macro_auroc:.3f}")

i = feats.eval_idx[0]
item = feats.dataset[i]
values, scores = predict(probes["QS1"], feats.embeddings[i])
probe_labels = LabelVector(probes["QS1"].qs, values)
print("\nreference report:", item.report.flat_text)
print("probe scores:     ", np.round(scores, 2).tolist())
print("probe cue:        ", build_cue([probe_labels], source="probe").text)
print("ground-truth cue: ", build_cue([item.gt.labels()["QS1"]]).text)

# A noisy cue source flips each answer independently; lower flip rates emulate a stronger classifier.
noisy = simulate_cue_source(item.gt.labels()["QS1"].values[None], 0.3, seed=1)[0]
print("noisy cue (30% flips):", template(labels_to_entities(LabelVector(probe_labels.qs, noisy))).text)

all_yes = labels_to_entities(LabelVector(probes["QS1"].qs, np.ones(4, np.int8)))
rng = np.random.default_rng(0)
print("\nprompt dropout with p=0.3 on a cue listing all four findings:")
for epoch in range(4):
    print(f"  epoch {epoch}:", template(prompt_dropout(all_yes, 0.3, rng)).text)
print("p=1 always yields the empty-cue sentinel:", template(prompt_dropout(all_yes, 1.0, rng)).text)
