"""Synthetic long-tail relation data and the recall evaluation suite.

The generator builds clips of tracked subject-object pairs. Every record
carries one single-label attention class and two multi-label bit-vectors
(spatial, contact). Labels follow a Zipf law per type, features are the mean
of the label prototypes plus Gaussian noise, and an optional post-feature
label flip injects irreducible label noise. Everything is driven by one
seeded counter generator, so a (config, seed) pair fixes the dataset bytes.

Evaluation ranks (pair, predicate) entries per frame by score with
deterministic tie-breaking and reports R@K, per-class recall, mR@K, and
head/tail bucket summaries. Ground-truth pairs are given (no detection), and
the triplet score is the predicate probability.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numcore as nc
from .errors import ContractError
from .freqgate import FrequencyPrior

RELATION_TYPES = ("attn", "spat", "cont")


# ---------------------------------------------------------------------------
# configuration and records
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    attn_classes: int = 10
    spat_classes: int = 6
    cont_classes: int = 16
    zipf_s: float = 1.5
    d: int = 16                  # raw feature dimension
    clips: int = 100
    test_clips: int = 25
    frames: int = 4
    pairs: int = 5
    noise: float = 0.3           # feature noise scale
    flip: float = 0.1            # post-feature label flip rate
    extra_label_rate: float = 0.25  # chance of a second spatial/contact label

    def problems(self) -> list:
        out = []
        for name in ("attn_classes", "spat_classes", "cont_classes", "d",
                     "clips", "test_clips", "frames", "pairs"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.zipf_s <= 0:
            out.append("zipf_s must be > 0")
        if self.noise < 0:
            out.append("noise must be >= 0")
        if not 0.0 <= self.flip < 1.0:
            out.append("flip must be in [0, 1)")
        if not 0.0 <= self.extra_label_rate <= 1.0:
            out.append("extra_label_rate must be in [0, 1]")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ContractError("; ".join(problems))

    def class_counts(self) -> dict:
        return {"attn": self.attn_classes, "spat": self.spat_classes,
                "cont": self.cont_classes}


@dataclass
class TripletRecord:
    clip: int
    frame: int
    subj: int
    obj: int
    feat: np.ndarray
    attn: int
    spat: list
    cont: list

    def to_json(self) -> dict:
        return {"clip": self.clip, "frame": self.frame, "subj": self.subj,
                "obj": self.obj, "feat": [float(v) for v in self.feat],
                "attn": int(self.attn), "spat": [int(b) for b in self.spat],
                "cont": [int(b) for b in self.cont]}

    @classmethod
    def from_json(cls, doc: dict) -> "TripletRecord":
        return cls(clip=int(doc["clip"]), frame=int(doc["frame"]),
                   subj=int(doc["subj"]), obj=int(doc["obj"]),
                   feat=np.asarray(doc["feat"], dtype=np.float64),
                   attn=int(doc["attn"]), spat=[int(b) for b in doc["spat"]],
                   cont=[int(b) for b in doc["cont"]])


def write_jsonl(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TripletRecord.from_json(json.loads(line)))
    return out


def group_clips(records) -> list:
    """Records bucketed by clip id, each clip sorted by (frame, subj, obj)."""
    byclip = {}
    for rec in records:
        byclip.setdefault(rec.clip, []).append(rec)
    clips = []
    for cid in sorted(byclip):
        clips.append(sorted(byclip[cid], key=lambda r: (r.frame, r.subj, r.obj)))
    return clips


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def zipf_pmf(n_classes: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n_classes + 1, dtype=np.float64)
    weights = ranks**-s
    return weights / weights.sum()


def _bits(classes: int, labels) -> list:
    bits = [0] * classes
    for lab in labels:
        bits[int(lab)] = 1
    return bits


def _generate_split(cfg: SyntheticConfig, n_clips: int, clip_base: int,
                    protos: dict, rng: nc.Rng) -> list:
    pmf = {t: zipf_pmf(c, cfg.zipf_s) for t, c in cfg.class_counts().items()}
    records = []
    for ci in range(n_clips):
        for t in range(cfg.frames):
            for p in range(cfg.pairs):
                attn = int(rng.categorical(pmf["attn"])[0])
                spat = {int(rng.categorical(pmf["spat"])[0])}
                if rng.uniforms(1)[0] <= cfg.extra_label_rate:
                    spat.add(int(rng.categorical(pmf["spat"])[0]))
                cont = {int(rng.categorical(pmf["cont"])[0])}
                if rng.uniforms(1)[0] <= cfg.extra_label_rate:
                    cont.add(int(rng.categorical(pmf["cont"])[0]))

                stack = [protos["attn"][attn]]
                stack += [protos["spat"][c] for c in sorted(spat)]
                stack += [protos["cont"][c] for c in sorted(cont)]
                feat = np.mean(stack, axis=0) + cfg.noise * rng.normals(cfg.d)

                # label flips happen after the feature is built, so flipped
                # records carry features that disagree with their labels
                if rng.uniforms(1)[0] <= cfg.flip:
                    attn = int(rng.integers(cfg.attn_classes)[0])
                if rng.uniforms(1)[0] <= cfg.flip:
                    spat = {int(rng.integers(cfg.spat_classes)[0])}
                if rng.uniforms(1)[0] <= cfg.flip:
                    cont = {int(rng.integers(cfg.cont_classes)[0])}

                records.append(TripletRecord(
                    clip=clip_base + ci, frame=t, subj=p, obj=cfg.pairs + p,
                    feat=feat, attn=attn,
                    spat=_bits(cfg.spat_classes, spat),
                    cont=_bits(cfg.cont_classes, cont)))
    return records


def label_counts(records, cfg: SyntheticConfig) -> dict:
    counts = {"attn": np.zeros(cfg.attn_classes),
              "spat": np.zeros(cfg.spat_classes),
              "cont": np.zeros(cfg.cont_classes)}
    for rec in records:
        counts["attn"][rec.attn] += 1
        counts["spat"] += np.asarray(rec.spat, dtype=np.float64)
        counts["cont"] += np.asarray(rec.cont, dtype=np.float64)
    return counts


def generate_dataset(cfg: SyntheticConfig, seed: int):
    """Returns (train records, test records, per-type train label counts)."""
    cfg.validate()
    root = nc.Rng(seed)
    proto_rng = root.spawn(0)
    protos = {t: proto_rng.normals((c, cfg.d))
              for t, c in cfg.class_counts().items()}
    train = _generate_split(cfg, cfg.clips, 0, protos, root.spawn(1))
    test = _generate_split(cfg, cfg.test_clips, cfg.clips, protos, root.spawn(2))
    return train, test, label_counts(train, cfg)


# ---------------------------------------------------------------------------
# ranking and recall
# ---------------------------------------------------------------------------

def _ranked_triplets(entries, k: int, constraint: bool, class_types) -> list:
    """Top-k (subj, obj, cls) by score descending; ties broken by ascending
    class index, then subject, then object. With the constraint on, only the
    best-scoring predicate per (pair, type) survives into the ranking."""
    order = sorted(entries, key=lambda e: (-e[3], e[2], e[0], e[1]))
    if constraint:
        seen = set()
        kept = []
        for s, o, c, score in order:
            slot = (s, o, 0 if class_types is None else int(class_types[c]))
            if slot in seen:
                continue
            seen.add(slot)
            kept.append((s, o, c, score))
        order = kept
    return [(s, o, c) for s, o, c, _ in order[:k]]


def recall_at_k(predictions: dict, ground_truth: dict, k: int,
                constraint: bool = False, class_types=None) -> float:
    """Mean over frames of (ground-truth triplets in the top-k) / (all
    ground-truth triplets of that frame). Keys identify clip-frames."""
    if k <= 0:
        raise ContractError("K must be positive")
    if not ground_truth:
        raise ContractError("ground truth is empty")
    per_frame = []
    for key in sorted(ground_truth):
        gt = set(map(tuple, ground_truth[key]))
        if not gt:
            continue
        top = set(_ranked_triplets(predictions.get(key, []), k, constraint, class_types))
        per_frame.append(len(gt & top) / len(gt))
    if not per_frame:
        raise ContractError("ground truth is empty")
    return float(np.mean(per_frame))


def mean_recall_at_k(predictions: dict, ground_truth: dict, k: int,
                     constraint: bool = False, class_types=None):
    """Per-predicate-class recall pooled over all frames, and the unweighted
    mean over classes that appear in the ground truth."""
    if k <= 0:
        raise ContractError("K must be positive")
    if not ground_truth:
        raise ContractError("ground truth is empty")
    matched, total = {}, {}
    for key in sorted(ground_truth):
        gt = set(map(tuple, ground_truth[key]))
        top = set(_ranked_triplets(predictions.get(key, []), k, constraint, class_types))
        for s, o, c in gt:
            total[c] = total.get(c, 0) + 1
            if (s, o, c) in top:
                matched[c] = matched.get(c, 0) + 1
    per_class = {c: matched.get(c, 0) / total[c] for c in sorted(total)}
    mr = float(np.mean(list(per_class.values())))
    return mr, per_class


def frequency_stratified_report(per_class_recalls: dict, prior: FrequencyPrior,
                                head_mass: float = 0.3, tail_share: float = 0.3) -> dict:
    """Mean recall over the head bucket (smallest class set holding the top
    `head_mass` of frequency mass) and the tail bucket (the `tail_share`
    least frequent classes, rounded up)."""
    f = prior.f
    by_mass = sorted(range(f.size), key=lambda c: (-f[c], c))
    head, acc = [], 0.0
    for c in by_mass:
        head.append(c)
        acc += f[c]
        if acc >= head_mass:
            break
    n_tail = max(1, math.ceil(tail_share * f.size))
    tail = sorted(range(f.size), key=lambda c: (f[c], c))[:n_tail]

    def bucket_mean(classes):
        vals = [per_class_recalls[c] for c in classes if c in per_class_recalls]
        return float(np.mean(vals)) if vals else float("nan")

    return {"head": bucket_mean(head), "tail": bucket_mean(tail),
            "head_classes": head, "tail_classes": tail}
