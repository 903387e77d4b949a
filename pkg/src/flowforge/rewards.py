"""Reward kernels: logit-weighted judge scores, layout-aware OCR reward, semi-hard mining."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .manifest import OcrGlyph


# --- ensemble judge score ---------------------------------------------------


@dataclass(frozen=True)
class NumericTokenLogits:
    values: tuple[float, ...]
    logits: tuple[float, ...]
    # opaque id of the rationale that preceded the rating tokens; no numeric role
    rationale_id: str | None = None

    def __post_init__(self):
        if len(self.values) < 2:
            raise ValueError("need at least two numeric tokens")
        if len(self.values) != len(self.logits):
            raise ValueError("values and logits differ in length")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValueError("token values must be strictly increasing")

    @classmethod
    def from_dict(cls, obj: dict) -> "NumericTokenLogits":
        return cls(
            tuple(float(v) for v in obj["values"]),
            tuple(float(z) for z in obj["logits"]),
            obj.get("rationale_id"),
        )


@dataclass(frozen=True)
class EnsembleConfig:
    passes: int = 1

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError("passes must be >= 1")


def logit_weighted_score(tokens: NumericTokenLogits) -> float:
    """Expected token value under softmax(logits)."""
    z = np.asarray(tokens.logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    w = np.exp(z - z.max())
    values = np.asarray(tokens.values, dtype=float)
    # normalise after summing so equal logits give the plain mean of V exactly
    score = math.fsum(w * values) / math.fsum(w)
    # rounding can step a hair outside the hull
    return min(max(score, values[0]), values[-1])


def ensemble_reward(per_pass: Sequence[NumericTokenLogits], config: EnsembleConfig | None = None) -> float:
    if not per_pass:
        raise ValueError("ensemble needs at least one pass")
    if config is not None and len(per_pass) != config.passes:
        raise ValueError(f"expected {config.passes} passes, got {len(per_pass)}")
    return math.fsum(logit_weighted_score(p) for p in per_pass) / len(per_pass)


# --- layout-aware OCR -------------------------------------------------------


@dataclass(frozen=True)
class OcrRewardConfig:
    w_text: float = 0.5
    w_layout: float = 0.5
    gate_threshold: float = 0.8
    distance_scale: float = 1.0
    # only penalise oversized glyphs: max(0, ln(pred / tgt))
    one_sided_scale: bool = False

    def __post_init__(self):
        if self.w_text < 0 or self.w_layout < 0 or self.w_text + self.w_layout <= 0:
            raise ValueError("weights must be non-negative with a positive sum")
        if not 0.0 <= self.gate_threshold <= 1.0:
            raise ValueError("gate_threshold must lie in [0, 1]")
        if not self.distance_scale > 0:
            raise ValueError("distance_scale must be > 0")


@dataclass(frozen=True)
class GlyphMatch:
    pred_index: int
    tgt_index: int
    d: float
    delta_s: float


def match_glyphs(
    pred: Sequence[OcrGlyph],
    tgt: Sequence[OcrGlyph],
    distance_scale: float = 1.0,
    one_sided_scale: bool = False,
) -> list[GlyphMatch]:
    """Greedy one-to-one matching of same-character glyphs by nearest center."""
    for g in (*pred, *tgt):
        if not g.scale > 0:
            raise ValueError("glyph scale must be > 0")
    pairs = []
    for i, p in enumerate(pred):
        for j, t in enumerate(tgt):
            if p.char == t.char:
                pairs.append((math.hypot(p.cx - t.cx, p.cy - t.cy), i, j))
    pairs.sort()
    used_p, used_t, matches = set(), set(), []
    for dist, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        log_ratio = math.log(pred[i].scale / tgt[j].scale)
        delta_s = max(0.0, log_ratio) if one_sided_scale else abs(log_ratio)
        matches.append(GlyphMatch(i, j, dist / distance_scale, delta_s))
    return matches


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ocr_text_score(s_pred: str, s_tgt: str) -> float:
    return max(0.0, 1.0 - levenshtein(s_pred, s_tgt) / max(len(s_tgt), 1))


def layout_aware_ocr_reward(
    pred_text: str,
    pred_glyphs: Sequence[OcrGlyph],
    tgt_text: str,
    tgt_glyphs: Sequence[OcrGlyph],
    config: OcrRewardConfig = OcrRewardConfig(),
) -> float:
    """Text term plus a gated layout term; ranges over [0, w_text + w_layout].

    The layout sum over matched glyphs is divided by max(|s_tgt|, 1) and the
    length ratio is clamped at 1, so a perfect match earns exactly w_layout.
    With w_text >= w_layout the reward cannot rise when the edit distance grows.
    """
    text_score = ocr_text_score(pred_text, tgt_text)
    reward = config.w_text * text_score
    if text_score < config.gate_threshold or config.w_layout == 0:
        return reward
    denom = max(len(tgt_text), 1)
    length_ratio = min(1.0, len(pred_text) / denom)
    matches = match_glyphs(pred_glyphs, tgt_glyphs, config.distance_scale, config.one_sided_scale)
    layout_sum = math.fsum(math.exp(-m.d) * math.exp(-m.delta_s) for m in matches)
    return reward + config.w_layout * length_ratio * layout_sum / denom


# --- semi-hard mining -------------------------------------------------------


@dataclass(frozen=True)
class CandidateRewards:
    instruction_id: str
    rewards: tuple[float, ...]


@dataclass(frozen=True)
class MiningConfig:
    mean_min: float = 0.6
    lower_quantile: float = 0.1
    quantile_max: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.lower_quantile < 0.5:
            raise ValueError("lower_quantile must lie in (0, 0.5)")


def semi_hard_select(candidates: Sequence[CandidateRewards], config: MiningConfig) -> list[str]:
    """Ids whose mean reward is satisfactory but whose lower quantile is unstable."""
    selected = []
    for cand in candidates:
        if len(cand.rewards) < 2:
            raise ValueError(f"{cand.instruction_id!r}: need at least 2 candidate rewards")
        r = np.sort(np.asarray(cand.rewards, dtype=float))
        mean = math.fsum(r) / len(r)
        low = float(np.quantile(r, config.lower_quantile))
        if mean >= config.mean_min and low <= config.quantile_max:
            selected.append(cand.instruction_id)
    return selected
