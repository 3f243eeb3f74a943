"""Role-specific sample selection, advantages, and training-record emission.

A completed rollout step yields one questioner sample, G responder samples,
and G*G verifier judgments per instance. Training keeps roughly 1/G of that:

- responder groups with zero reward variance are discarded;
- questioner positives are the questions behind kept responder groups,
  balanced by an equal (availability-clamped) seeded draw of non-positive
  questioner samples;
- verifier vote groups with zero reward variance are discarded, then groups
  whose majority agrees with the rule check are preferred, topped up (or
  subsampled) with a seeded draw to match the number of kept questions.

Kept samples get z-score advantages (population std): responder/verifier
within their group, questioner against the selected step batch with a 1e-6
std floor. Records serialize to JSONL with a count + sha256 footer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateGroup, DomainError, IntegrityError, ShapeError

logger = logging.getLogger(__name__)

RECORD_VERSION = 1
_BATCH_STD_FLOOR = 1e-6

ROLE_ORDER = ("questioner", "responder", "verifier")


@dataclass(frozen=True)
class QuestionerSample:
    """One questioner draw: the proposal prompt, raw output, and its reward."""

    instance_id: str
    cluster_id: str
    task: str
    prompt: str
    completion: str
    reward: float


@dataclass(frozen=True)
class ResponderGroup:
    """The G answers drawn for one accepted question, with rule/vote rewards."""

    instance_id: str
    cluster_id: str
    task: str
    prompt: str
    completions: tuple[str, ...]
    rewards: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.completions) != len(self.rewards):
            raise ShapeError(
                f"group {self.instance_id}: {len(self.completions)} completions "
                f"vs {len(self.rewards)} rewards"
            )
        if len(self.completions) < 2:
            raise ShapeError(f"group {self.instance_id}: needs >= 2 completions")


@dataclass(frozen=True)
class VerifierGroup:
    """The G equivalence votes cast on one response.

    rewards are 1 where the vote matched the group majority. rule_pass is the
    rule check on the underlying response; majority vs rule_pass drives
    agreement-first selection. parse_failures counts votes defaulted to 0
    because no decision marker was found.
    """

    instance_id: str
    response_index: int
    cluster_id: str
    task: str
    prompt: str
    completions: tuple[str, ...]
    rewards: tuple[float, ...]
    majority: int
    rule_pass: bool
    parse_failures: int = 0

    def __post_init__(self) -> None:
        if len(self.completions) != len(self.rewards):
            raise ShapeError(
                f"vote group {self.group_id}: {len(self.completions)} completions "
                f"vs {len(self.rewards)} rewards"
            )
        if len(self.completions) < 2:
            raise ShapeError(f"vote group {self.group_id}: needs >= 2 completions")
        if self.majority not in (0, 1):
            raise DomainError(f"majority must be 0 or 1, got {self.majority}")

    @property
    def group_id(self) -> str:
        return f"{self.instance_id}:v{self.response_index:02d}"


@dataclass(frozen=True)
class TrainingRecord:
    role: str
    group_id: str
    index: int
    step: int
    prompt: str
    completion: str
    reward: float
    advantage: float
    meta: dict

    def to_json(self) -> dict:
        return {
            "v": RECORD_VERSION,
            "role": self.role,
            "group_id": self.group_id,
            "index": self.index,
            "step": self.step,
            "prompt": self.prompt,
            "completion": self.completion,
            "reward": self.reward,
            "advantage": self.advantage,
            "meta": self.meta,
        }


@dataclass(frozen=True)
class SelectionReport:
    kept_res_groups: int
    kept_que_pos: int
    kept_que_neg: int
    kept_ver_groups: int
    raw_counts: dict[str, int]
    reduction_ratio: float

    def to_json(self) -> dict:
        return {
            "kept_res_groups": self.kept_res_groups,
            "kept_que_pos": self.kept_que_pos,
            "kept_que_neg": self.kept_que_neg,
            "kept_ver_groups": self.kept_ver_groups,
            "raw_counts": dict(self.raw_counts),
            "reduction_ratio": self.reduction_ratio,
        }


def _population_std(rewards: Sequence[float]) -> float:
    return float(np.asarray(rewards, dtype=np.float64).std())


def select_responder_groups(groups: Sequence[ResponderGroup]) -> list[ResponderGroup]:
    """Keep exactly the groups whose rewards have non-zero variance."""
    return [group for group in groups if _population_std(group.rewards) > 0.0]


def select_questioner_samples(
    samples: Sequence[QuestionerSample],
    kept_instance_ids: set[str],
    rng: random.Random,
) -> tuple[list[QuestionerSample], list[QuestionerSample]]:
    """Positives are questions behind kept responder groups; negatives are a
    seeded uniform draw from non-positive-reward samples, count-matched to the
    positives (clamped by availability)."""
    positives = [s for s in samples if s.instance_id in kept_instance_ids]
    pool = [s for s in samples if s.reward <= 0.0]
    count = min(len(positives), len(pool))
    negatives = rng.sample(pool, count) if count else []
    negatives.sort(key=lambda s: s.instance_id)
    return positives, negatives


def select_verifier_groups(
    groups: Sequence[VerifierGroup],
    target_count: int,
    rng: random.Random,
) -> list[VerifierGroup]:
    """Agreement-first selection capped at target_count groups.

    Zero-reward-variance groups (unanimous votes) are discarded outright so
    group advantages stay well defined. Groups whose majority matches the
    rule check are preferred; conflicting groups top the total up to
    target_count via a seeded draw, and an agreement overflow is subsampled
    down to target_count the same way.
    """
    if target_count < 0:
        raise DomainError(f"target_count must be >= 0, got {target_count}")
    eligible = [g for g in groups if _population_std(g.rewards) > 0.0]
    agreement = [g for g in eligible if g.majority == int(g.rule_pass)]
    conflict = [g for g in eligible if g.majority != int(g.rule_pass)]
    if len(agreement) >= target_count:
        kept = rng.sample(agreement, target_count)
    else:
        fill = min(target_count - len(agreement), len(conflict))
        kept = agreement + (rng.sample(conflict, fill) if fill else [])
    kept.sort(key=lambda g: (g.instance_id, g.response_index))
    return kept


def group_advantages(rewards: Sequence[float]) -> list[float]:
    """Within-group z-score with population standard deviation."""
    arr = np.asarray(rewards, dtype=np.float64)
    if arr.size < 2:
        raise ShapeError(f"need >= 2 rewards, got {arr.size}")
    std = float(arr.std())
    if std == 0.0:
        raise DegenerateGroup("all rewards in the group are equal")
    mean = float(arr.mean())
    return [float((r - mean) / std) for r in arr]


def batch_advantages(rewards: Sequence[float]) -> list[float]:
    """Z-score against the whole questioner step batch (population std,
    floored at 1e-6). A single record gets advantage 0 with a warning."""
    arr = np.asarray(rewards, dtype=np.float64)
    if arr.size == 0:
        return []
    if arr.size == 1:
        logger.warning("single questioner record in step batch; advantage set to 0")
        return [0.0]
    std = max(float(arr.std()), _BATCH_STD_FLOOR)
    mean = float(arr.mean())
    return [float((r - mean) / std) for r in arr]


@dataclass(frozen=True)
class ObjectiveGroup:
    """Inputs to the on-policy objective check for one rollout group."""

    token_ratios: tuple[tuple[float, ...], ...]
    advantages: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.token_ratios) != len(self.advantages):
            raise ShapeError(
                f"{len(self.token_ratios)} sequences vs {len(self.advantages)} advantages"
            )
        if not self.token_ratios:
            raise ShapeError("objective group has no sequences")


def grpo_objective(groups: Sequence[ObjectiveGroup]) -> float:
    """Mean over groups of (1/sum_j |y_j|) * sum_i A_i * sum_t rho_{i,t}.

    With all ratios 1 this reduces to sum_i A_i*|y_i| / sum_j |y_j| per
    group. Verification routine only; no optimization happens here.
    """
    if not groups:
        raise ShapeError("need at least one group")
    totals: list[float] = []
    for group in groups:
        token_count = 0
        weighted = 0.0
        for ratios, advantage in zip(group.token_ratios, group.advantages):
            if not ratios:
                raise ShapeError("objective sequence has no tokens")
            for ratio in ratios:
                if not math.isfinite(ratio) or ratio <= 0.0:
                    raise DomainError(f"token ratio must be finite and positive, got {ratio}")
            token_count += len(ratios)
            weighted += advantage * sum(ratios)
        totals.append(weighted / token_count)
    return sum(totals) / len(totals)


def _questioner_record(
    sample: QuestionerSample, advantage: float, step: int, kind: str
) -> TrainingRecord:
    return TrainingRecord(
        role="questioner",
        group_id=sample.instance_id,
        index=0,
        step=step,
        prompt=sample.prompt,
        completion=sample.completion,
        reward=sample.reward,
        advantage=advantage,
        meta={"cluster_id": sample.cluster_id, "task": sample.task, "selection": kind},
    )


def build_step_batch(
    step: int,
    que_samples: Sequence[QuestionerSample],
    res_groups: Sequence[ResponderGroup],
    ver_groups: Sequence[VerifierGroup],
    rng: random.Random,
) -> tuple[list[TrainingRecord], SelectionReport]:
    """Apply all three selection rules and attach advantages.

    Returns records sorted by (role, group_id, index) plus the selection
    accounting used for the step report.
    """
    kept_res = select_responder_groups(res_groups)
    kept_ids = {g.instance_id for g in kept_res}
    positives, negatives = select_questioner_samples(que_samples, kept_ids, rng)
    kept_ver = select_verifier_groups(ver_groups, len(positives), rng)

    records: list[TrainingRecord] = []

    selected_que = positives + negatives
    que_advantages = batch_advantages([s.reward for s in selected_que])
    for sample, advantage in zip(positives, que_advantages[: len(positives)]):
        records.append(_questioner_record(sample, advantage, step, "positive"))
    for sample, advantage in zip(negatives, que_advantages[len(positives) :]):
        records.append(_questioner_record(sample, advantage, step, "negative"))

    for group in kept_res:
        advantages = group_advantages(group.rewards)
        for index, (completion, reward, advantage) in enumerate(
            zip(group.completions, group.rewards, advantages)
        ):
            records.append(
                TrainingRecord(
                    role="responder",
                    group_id=group.instance_id,
                    index=index,
                    step=step,
                    prompt=group.prompt,
                    completion=completion,
                    reward=reward,
                    advantage=advantage,
                    meta={"cluster_id": group.cluster_id, "task": group.task},
                )
            )

    for group in kept_ver:
        advantages = group_advantages(group.rewards)
        for index, (completion, reward, advantage) in enumerate(
            zip(group.completions, group.rewards, advantages)
        ):
            records.append(
                TrainingRecord(
                    role="verifier",
                    group_id=group.group_id,
                    index=index,
                    step=step,
                    prompt=group.prompt,
                    completion=completion,
                    reward=reward,
                    advantage=advantage,
                    meta={
                        "cluster_id": group.cluster_id,
                        "task": group.task,
                        "majority": group.majority,
                        "rule_pass": group.rule_pass,
                        "vote_parse_failures": group.parse_failures,
                    },
                )
            )

    records.sort(key=lambda r: (r.role, r.group_id, r.index))

    raw_counts = {
        "questioner": len(que_samples),
        "responder": sum(len(g.completions) for g in res_groups),
        "verifier": sum(len(g.completions) for g in ver_groups),
    }
    raw_total = sum(raw_counts.values())
    report = SelectionReport(
        kept_res_groups=len(kept_res),
        kept_que_pos=len(positives),
        kept_que_neg=len(negatives),
        kept_ver_groups=len(kept_ver),
        raw_counts=raw_counts,
        reduction_ratio=(len(records) / raw_total) if raw_total else 0.0,
    )
    return records, report


def _record_line(record: TrainingRecord) -> str:
    return json.dumps(record.to_json(), sort_keys=True, ensure_ascii=False) + "\n"


def emit_records(records: Sequence[TrainingRecord], path: str) -> str:
    """Write records (already ordered) as JSONL with a count/digest footer.

    The digest is sha256 over the record-line bytes, footer excluded. The
    write is atomic: a temp file in the same directory is renamed into place.
    """
    lines = [_record_line(record) for record in records]
    digest = hashlib.sha256("".join(lines).encode("utf-8")).hexdigest()
    footer = json.dumps({"_footer": {"count": len(lines), "sha256": digest}}, sort_keys=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as handle:
        handle.writelines(lines)
        handle.write(footer + "\n")
    os.replace(tmp_path, path)
    return path


def read_records(path: str) -> list[dict]:
    """Read a batch file back, verifying the footer count and digest."""
    with open(path, "r", encoding="utf-8", newline="\n") as handle:
        lines = handle.readlines()
    if not lines:
        raise IntegrityError(f"{path}: empty batch file (missing footer)")
    try:
        footer_obj = json.loads(lines[-1])
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: footer is not valid JSON: {exc}") from exc
    footer = footer_obj.get("_footer") if isinstance(footer_obj, dict) else None
    if not isinstance(footer, dict):
        raise IntegrityError(f"{path}: last line is not a footer")
    body = lines[:-1]
    if footer.get("count") != len(body):
        raise IntegrityError(
            f"{path}: footer count {footer.get('count')} != {len(body)} records"
        )
    digest = hashlib.sha256("".join(body).encode("utf-8")).hexdigest()
    if footer.get("sha256") != digest:
        raise IntegrityError(f"{path}: content digest mismatch")
    records = []
    for lineno, line in enumerate(body, start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise IntegrityError(f"{path}:{lineno}: bad record JSON: {exc}") from exc
    return records
