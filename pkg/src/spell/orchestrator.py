"""Self-play rollout engine.

Each instance runs the full pipeline: sample a cluster and task, sample m
documents, assemble the questioner context (history exemplars included),
draw one question, reject format errors and ungrounded questions, draw G
answers over the whole cluster (unseen documents act as distractors), cast
G verifier votes per answer, score everything, and feed solvable questions
back into the cluster's history memory. Instances accumulate until the step
holds at least batch_size responder groups, then selection + advantages run
and the step is emitted as a JSONL batch plus a JSON report.

Determinism contract: with the simulated backend the whole run is a pure
function of (config, corpus, seed). All sampling draws come from one master
RNG in instance-start order; request ids encode (step, instance ordinal,
phase); instances may execute concurrently but commit in start order; no
artifact contains a timestamp.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import httpx

from .backends.base import (
    ROLE_QUESTIONER,
    ROLE_RESPONDER,
    ROLE_VERIFIER,
    ApproxCharTokenizer,
    Backend,
    GenerationRequest,
    Tokenizer,
)
from .batching import (
    QuestionerSample,
    ResponderGroup,
    TrainingRecord,
    VerifierGroup,
    ObjectiveGroup,
    build_step_batch,
    emit_records,
    grpo_objective,
)
from .corpus.store import CorpusStore
from .curriculum import HistoryMemory, assemble_context, grounding_filter, sample_documents
from .errors import (
    BackendError,
    ConfigError,
    CorpusExhausted,
    DomainError,
    RestoreError,
)
from .evaluation import truncate_text
from .prompts import (
    FormatError,
    join_documents,
    parse_question_output,
    parse_responder_answer,
    parse_verdict,
    render_questioner,
    render_responder_content,
    render_verifier,
)
from .rewards import (
    RewardConfig,
    cem_match,
    majority_vote,
    questioner_reward,
    responder_reward,
    verifier_rewards,
)
from .types import ALL_TASKS, DocumentCluster, HistoryEntry, QuestionSpec

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
REPORT_VERSION = 1

_COUNTER_KEYS = (
    "started",
    "committed",
    "format_error",
    "ungrounded",
    "solvable",
    "rbar_zero",
    "rbar_one",
    "backend_failures",
)


def _uniform_task_mix() -> dict[str, float]:
    weight = 1.0 / len(ALL_TASKS)
    return {task: weight for task in ALL_TASKS}


@dataclass(frozen=True)
class LoopConfig:
    """Knobs for one rollout step; defaults follow the training recipe."""

    batch_size: int = 128
    group_size: int = 8
    docs_per_question: int = 5
    history_size: int = 3
    task_mix: dict[str, float] = field(default_factory=_uniform_task_mix)
    max_input_tokens: int = 16384
    seed: int = 0
    parallel_instances: int = 1
    grounding_attempts: int = 1
    max_instances_per_step: int = 0  # 0 means 32 * batch_size
    temperature: float = 0.7
    top_p: float = 0.95
    max_tokens: int = 4096

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2, got {self.group_size}")
        if self.docs_per_question < 1:
            raise ConfigError(f"docs_per_question must be >= 1, got {self.docs_per_question}")
        if self.history_size < 1:
            raise ConfigError(f"history_size must be >= 1, got {self.history_size}")
        if self.parallel_instances < 1:
            raise ConfigError(f"parallel_instances must be >= 1, got {self.parallel_instances}")
        if self.grounding_attempts < 1:
            raise ConfigError(f"grounding_attempts must be >= 1, got {self.grounding_attempts}")
        if self.max_instances_per_step < 0:
            raise ConfigError(
                f"max_instances_per_step must be >= 0, got {self.max_instances_per_step}"
            )
        unknown = set(self.task_mix) - set(ALL_TASKS)
        if unknown:
            raise ConfigError(f"task_mix has unknown tasks: {sorted(unknown)}")
        if not self.task_mix:
            raise ConfigError("task_mix is empty")
        total = sum(self.task_mix.values())
        if any(w < 0 for w in self.task_mix.values()) or total <= 0:
            raise ConfigError("task_mix weights must be >= 0 and sum to > 0")

    @property
    def instance_cap(self) -> int:
        return self.max_instances_per_step or 32 * self.batch_size


class LoopState:
    """Mutable loop progress: step counter, RNG, per-cluster memories."""

    def __init__(self, seed: int) -> None:
        self.step_completed = 0
        self.rng = random.Random(seed)
        self.memories: dict[str, HistoryMemory] = {}
        self.counters: dict[str, int] = {key: 0 for key in _COUNTER_KEYS}

    def memory_for(self, cluster_id: str, capacity: int) -> HistoryMemory:
        memory = self.memories.get(cluster_id)
        if memory is None:
            memory = HistoryMemory(capacity)
            self.memories[cluster_id] = memory
        return memory

    def to_json(self, config_digest: str) -> dict:
        rng_version, internal, gauss_next = self.rng.getstate()
        return {
            "version": CHECKPOINT_VERSION,
            "step_completed": self.step_completed,
            "rng_state": [rng_version, list(internal), gauss_next],
            "memories": {
                cluster_id: memory.to_json()
                for cluster_id, memory in sorted(self.memories.items())
            },
            "counters": dict(self.counters),
            "config_digest": config_digest,
        }

    @classmethod
    def from_json(cls, payload: dict, history_size: int) -> "LoopState":
        state = cls(seed=0)
        state.step_completed = int(payload["step_completed"])
        rng_version, internal, gauss_next = payload["rng_state"]
        state.rng.setstate((rng_version, tuple(internal), gauss_next))
        state.memories = {
            cluster_id: HistoryMemory.from_json(entries, capacity=history_size)
            for cluster_id, entries in payload["memories"].items()
        }
        counters = {key: 0 for key in _COUNTER_KEYS}
        counters.update({k: int(v) for k, v in payload.get("counters", {}).items()})
        state.counters = counters
        return state


def save_checkpoint(state: LoopState, path: str, config_digest: str) -> None:
    payload = json.dumps(state.to_json(config_digest), sort_keys=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(payload + "\n")
    os.replace(tmp_path, path)


def restore_checkpoint(path: str, history_size: int) -> tuple[LoopState, str]:
    """Load a checkpoint; returns (state, stored config digest)."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = handle.read()
    except OSError as exc:
        raise RestoreError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise RestoreError(
            f"checkpoint {path} is corrupt at offset {exc.pos}: {exc.msg}"
        ) from exc
    if not isinstance(payload, dict):
        raise RestoreError(f"checkpoint {path}: expected a JSON object")
    version = payload.get("version")
    if not isinstance(version, int) or version < 1:
        raise RestoreError(f"checkpoint {path}: missing or invalid version field")
    if version > CHECKPOINT_VERSION:
        raise RestoreError(
            f"checkpoint {path} has version {version}, newer than supported "
            f"{CHECKPOINT_VERSION}"
        )
    try:
        state = LoopState.from_json(payload, history_size)
    except (KeyError, TypeError, ValueError) as exc:
        raise RestoreError(f"checkpoint {path}: malformed field: {exc}") from exc
    return state, str(payload.get("config_digest", ""))


@dataclass
class RoleBatches:
    que: list[QuestionerSample] = field(default_factory=list)
    res: list[ResponderGroup] = field(default_factory=list)
    ver: list[VerifierGroup] = field(default_factory=list)


@dataclass(frozen=True)
class _PreparedInstance:
    ordinal: int
    instance_id: str
    cluster: DocumentCluster
    task: str
    sampled_doc_ids: tuple[str, ...]
    questioner_prompt: str


@dataclass
class _InstanceDelta:
    prepared: _PreparedInstance
    outcome: str
    que_sample: QuestionerSample | None = None
    res_group: ResponderGroup | None = None
    ver_groups: list[VerifierGroup] = field(default_factory=list)
    push_entry: HistoryEntry | None = None
    question_reward: float = 0.0
    pass_count: int | None = None
    error: str | None = None


class LoopRunner:
    """Owns LoopState and executes training steps against a corpus store."""

    def __init__(
        self,
        store: CorpusStore,
        backend: Backend,
        config: LoopConfig,
        reward_config: RewardConfig | None = None,
        *,
        sink_dir: str,
        checkpoint_path: str | None = None,
        webhook_url: str | None = None,
        webhook_retries: int = 3,
        webhook_client: httpx.Client | None = None,
        tokenizer: Tokenizer | None = None,
        config_digest: str = "",
    ) -> None:
        if reward_config is None:
            reward_config = RewardConfig(group_size=config.group_size)
        if reward_config.group_size != config.group_size:
            raise ConfigError(
                f"reward group_size {reward_config.group_size} != loop group_size "
                f"{config.group_size}"
            )
        self.store = store
        self.backend = backend
        self.config = config
        self.rewards = reward_config
        self.sink_dir = sink_dir
        self.checkpoint_path = checkpoint_path
        self.webhook_url = webhook_url.rstrip("/") if webhook_url else None
        self.webhook_retries = webhook_retries
        self._webhook_client = webhook_client
        self.tokenizer = tokenizer or ApproxCharTokenizer()
        self.config_digest = config_digest
        self.state = LoopState(config.seed)
        self._tasks = sorted(config.task_mix)
        self._weights = [config.task_mix[task] for task in self._tasks]
        if not store.clusters:
            raise CorpusExhausted("corpus store has no clusters")

    def resume(self, checkpoint_path: str) -> None:
        state, stored_digest = restore_checkpoint(checkpoint_path, self.config.history_size)
        if stored_digest and self.config_digest and stored_digest != self.config_digest:
            logger.warning(
                "checkpoint %s was written under config digest %s, current is %s",
                checkpoint_path,
                stored_digest,
                self.config_digest,
            )
        self.state = state

    # -- instance pipeline --------------------------------------------------

    def _request(self, prompt: str, n: int, role: str, request_id: str) -> GenerationRequest:
        return GenerationRequest(
            prompt=prompt,
            n=n,
            role_tag=role,
            request_id=request_id,
            temperature=self.config.temperature,
            top_p=self.config.top_p,
            max_tokens=self.config.max_tokens,
        )

    def _prepare_instance(self, step: int, ordinal: int) -> _PreparedInstance:
        """Consume master-RNG draws for one instance, in start order."""
        rng = self.state.rng
        cluster = rng.choice(self.store.clusters)
        task = rng.choices(self._tasks, weights=self._weights, k=1)[0]
        sampled = sample_documents(cluster, self.config.docs_per_question, rng)
        memory = self.state.memory_for(cluster.cluster_id, self.config.history_size)
        context_ids, exemplars = assemble_context(memory, sampled)
        docs = [(doc_id, self.store.document_text(doc_id)) for doc_id in context_ids]
        prompt = render_questioner(docs, task, exemplars)
        return _PreparedInstance(
            ordinal=ordinal,
            instance_id=f"s{step:06d}i{ordinal:05d}",
            cluster=cluster,
            task=task,
            sampled_doc_ids=tuple(sampled),
            questioner_prompt=prompt,
        )

    def _responder_prompt(self, prepared: _PreparedInstance, spec: QuestionSpec) -> str:
        docs = self.store.cluster_docs(prepared.cluster)
        block = join_documents(docs)
        overhead = self.tokenizer.count(render_responder_content("", spec))
        budget = max(2, self.config.max_input_tokens - overhead)
        return render_responder_content(truncate_text(block, budget, self.tokenizer), spec)

    def _execute_instance(self, prepared: _PreparedInstance) -> _InstanceDelta:
        """Run one instance end to end. Pure w.r.t. shared loop state."""
        cfg = self.config
        base_id = prepared.instance_id
        try:
            que_result = self.backend.generate(
                self._request(prepared.questioner_prompt, 1, ROLE_QUESTIONER, f"{base_id}:que")
            )
            raw_question = que_result.completions[0]
            parsed = parse_question_output(raw_question, prepared.task)
            if isinstance(parsed, FormatError):
                reward = questioner_reward(0.0, True, False, self.rewards)
                return _InstanceDelta(
                    prepared=prepared,
                    outcome="format_error",
                    que_sample=self._que_sample(prepared, raw_question, reward),
                    question_reward=reward,
                )
            grounded = grounding_filter(
                self.backend,
                parsed,
                request_id_base=base_id,
                attempts=cfg.grounding_attempts,
                numeric_rel_tol=self.rewards.numeric_rel_tol,
                temperature=cfg.temperature,
                top_p=cfg.top_p,
                max_tokens=cfg.max_tokens,
            )
            if not grounded:
                reward = questioner_reward(0.0, False, True, self.rewards)
                return _InstanceDelta(
                    prepared=prepared,
                    outcome="ungrounded",
                    que_sample=self._que_sample(prepared, raw_question, reward),
                    question_reward=reward,
                )

            res_prompt = self._responder_prompt(prepared, parsed)
            res_result = self.backend.generate(
                self._request(res_prompt, cfg.group_size, ROLE_RESPONDER, f"{base_id}:res")
            )
            responses = list(res_result.completions)
            extracted = [parse_responder_answer(text, prepared.task) for text in responses]
            rule_pass = [
                cem_match(answer, parsed.answer, prepared.task,
                          numeric_rel_tol=self.rewards.numeric_rel_tol)
                for answer in extracted
            ]

            ver_groups: list[VerifierGroup] = []
            responder_rewards: list[float] = []
            for i, answer in enumerate(extracted):
                ver_prompt = render_verifier(parsed.question, answer, parsed.answer)
                ver_result = self.backend.generate(
                    self._request(ver_prompt, cfg.group_size, ROLE_VERIFIER, f"{base_id}:ver{i:02d}")
                )
                verdicts = [parse_verdict(text) for text in ver_result.completions]
                votes = [v if v is not None else 0 for v in verdicts]
                parse_failures = sum(1 for v in verdicts if v is None)
                majority, vote_rewards = verifier_rewards(votes)
                responder_rewards.append(responder_reward(rule_pass[i], majority))
                ver_groups.append(
                    VerifierGroup(
                        instance_id=base_id,
                        response_index=i,
                        cluster_id=prepared.cluster.cluster_id,
                        task=prepared.task,
                        prompt=ver_prompt,
                        completions=tuple(ver_result.completions),
                        rewards=tuple(float(r) for r in vote_rewards),
                        majority=majority,
                        rule_pass=rule_pass[i],
                        parse_failures=parse_failures,
                    )
                )

            mean_reward = sum(responder_rewards) / len(responder_rewards)
            reward = questioner_reward(mean_reward, True, True, self.rewards)
            pass_count = round(sum(responder_rewards))
            if reward > 0.0:
                outcome = "solvable"
            elif pass_count == 0:
                outcome = "rbar_zero"
            else:
                outcome = "rbar_one"
            push = None
            if reward > 0.0:
                push = HistoryEntry(
                    doc_ids=prepared.sampled_doc_ids,
                    question=parsed.question,
                    answer=parsed.answer,
                )
            return _InstanceDelta(
                prepared=prepared,
                outcome=outcome,
                que_sample=self._que_sample(prepared, raw_question, reward),
                res_group=ResponderGroup(
                    instance_id=base_id,
                    cluster_id=prepared.cluster.cluster_id,
                    task=prepared.task,
                    prompt=res_prompt,
                    completions=tuple(responses),
                    rewards=tuple(float(r) for r in responder_rewards),
                ),
                ver_groups=ver_groups,
                push_entry=push,
                question_reward=reward,
                pass_count=pass_count,
            )
        except BackendError as exc:
            logger.warning("instance %s aborted: %s", base_id, exc)
            return _InstanceDelta(prepared=prepared, outcome="backend_failure", error=str(exc))

    def _que_sample(
        self, prepared: _PreparedInstance, completion: str, reward: float
    ) -> QuestionerSample:
        return QuestionerSample(
            instance_id=prepared.instance_id,
            cluster_id=prepared.cluster.cluster_id,
            task=prepared.task,
            prompt=prepared.questioner_prompt,
            completion=completion,
            reward=reward,
        )

    # -- step loop -----------------------------------------------------------

    def collect_step(self, step: int) -> tuple[RoleBatches, dict, dict]:
        """Run instances until batch_size responder groups are collected.

        Returns (batches, per-step counters, mean-reward pass-count
        histogram). Raises CorpusExhausted when the per-step instance cap is
        hit first.
        """
        cfg = self.config
        batches = RoleBatches()
        counters = {key: 0 for key in _COUNTER_KEYS}
        histogram = {str(i): 0 for i in range(cfg.group_size + 1)}
        started = 0
        window: list[tuple[_PreparedInstance, Future]] = []
        with ThreadPoolExecutor(max_workers=cfg.parallel_instances) as pool:
            while len(batches.res) < cfg.batch_size:
                while len(window) < cfg.parallel_instances and started < cfg.instance_cap:
                    prepared = self._prepare_instance(step, started)
                    started += 1
                    counters["started"] += 1
                    window.append((prepared, pool.submit(self._execute_instance, prepared)))
                if not window:
                    raise CorpusExhausted(
                        f"step {step}: started {started} instances (cap "
                        f"{cfg.instance_cap}) but collected only "
                        f"{len(batches.res)}/{cfg.batch_size} responder groups"
                    )
                prepared, future = window.pop(0)
                delta = future.result()
                self._commit(delta, batches, counters, histogram)
            # The stop condition was reached; drain without committing so the
            # batch never overshoots. Their RNG draws stay consumed, which
            # keeps reruns aligned.
            for _, future in window:
                future.result()
        return batches, counters, histogram

    def _commit(
        self,
        delta: _InstanceDelta,
        batches: RoleBatches,
        counters: dict[str, int],
        histogram: dict[str, int],
    ) -> None:
        if delta.outcome == "backend_failure":
            counters["backend_failures"] += 1
            return
        counters["committed"] += 1
        counters[delta.outcome] += 1
        assert delta.que_sample is not None
        batches.que.append(delta.que_sample)
        if delta.res_group is not None:
            batches.res.append(delta.res_group)
            batches.ver.extend(delta.ver_groups)
        if delta.pass_count is not None:
            histogram[str(delta.pass_count)] += 1
        if delta.push_entry is not None:
            memory = self.state.memory_for(
                delta.prepared.cluster.cluster_id, self.config.history_size
            )
            memory.push_solvable(delta.push_entry, delta.question_reward)

    def _selection_rng(self, step: int) -> random.Random:
        key = f"{self.config.seed}|select|{step}".encode("utf-8")
        return random.Random(int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big"))

    def _objective(self, records: list[TrainingRecord], role: str) -> float:
        """On-policy objective (all ratios 1) over the emitted groups.

        Questioner records are normalized per sample, so each forms its own
        group; responder/verifier records group by group_id.
        """
        grouped: dict[str, list[TrainingRecord]] = {}
        for record in records:
            if record.role != role:
                continue
            key = record.group_id if role != "questioner" else f"{record.group_id}#{record.index}"
            grouped.setdefault(key, []).append(record)
        if not grouped:
            return 0.0
        groups = []
        for key in sorted(grouped):
            members = grouped[key]
            ratios = tuple(
                tuple(1.0 for _ in range(max(1, self.tokenizer.count(m.completion))))
                for m in members
            )
            groups.append(
                ObjectiveGroup(token_ratios=ratios, advantages=tuple(m.advantage for m in members))
            )
        return grpo_objective(groups)

    def run_training_step(self) -> dict:
        """Execute one full step; returns the report after files are final.

        Batch and report files are written atomically; the in-memory state
        and checkpoint advance only after the trainer webhook (when
        configured) acknowledges the step.
        """
        step = self.state.step_completed + 1
        if hasattr(self.backend, "set_step"):
            self.backend.set_step(step)
        batches, counters, histogram = self.collect_step(step)
        records, selection = build_step_batch(
            step, batches.que, batches.res, batches.ver, self._selection_rng(step)
        )
        os.makedirs(self.sink_dir, exist_ok=True)
        batch_path = os.path.join(self.sink_dir, f"step_{step:06d}.jsonl")
        emit_records(records, batch_path)

        def _mean(values: list[float]) -> float:
            return sum(values) / len(values) if values else 0.0

        report = {
            "v": REPORT_VERSION,
            "step": step,
            "instances": counters,
            "collected": {
                "questioner_samples": len(batches.que),
                "responder_groups": len(batches.res),
                "verifier_groups": len(batches.ver),
            },
            "selection": selection.to_json(),
            "emitted_records": len(records),
            "rewards": {
                "questioner_mean": _mean([s.reward for s in batches.que]),
                "responder_mean": _mean(
                    [r for group in batches.res for r in group.rewards]
                ),
                "verifier_mean": _mean(
                    [r for group in batches.ver for r in group.rewards]
                ),
            },
            "rbar_histogram": histogram,
            "solvable_rate": (
                counters["solvable"] / counters["committed"] if counters["committed"] else 0.0
            ),
            "memory": {
                "clusters_with_memory": len(self.state.memories),
                "max_size": max((len(m) for m in self.state.memories.values()), default=0),
                "total_entries": sum(len(m) for m in self.state.memories.values()),
                "capacity": self.config.history_size,
            },
            "objective": {
                "questioner": self._objective(records, "questioner"),
                "responder": self._objective(records, "responder"),
                "verifier": self._objective(records, "verifier"),
            },
            "batch_file": os.path.basename(batch_path),
        }
        report_path = os.path.join(self.sink_dir, f"step_{step:06d}.report.json")
        tmp_path = report_path + ".tmp"
        with open(tmp_path, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(report, handle, sort_keys=True, indent=2)
            handle.write("\n")
        os.replace(tmp_path, report_path)

        if self.webhook_url:
            self._notify_trainer(report)

        for key, value in counters.items():
            self.state.counters[key] += value
        self.state.step_completed = step
        if self.checkpoint_path:
            save_checkpoint(self.state, self.checkpoint_path, self.config_digest)
        return report

    def _notify_trainer(self, report: dict) -> None:
        """Block until the trainer acknowledges the step (on-policy gate)."""
        url = f"{self.webhook_url}/step"
        attempts = self.webhook_retries + 1
        last = ""
        for attempt in range(attempts):
            if attempt:
                time.sleep(0.25 * (2 ** (attempt - 1)))
            try:
                if self._webhook_client is not None:
                    response = self._webhook_client.post(url, json=report, timeout=30.0)
                else:
                    response = httpx.post(url, json=report, timeout=30.0)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                logger.warning("trainer webhook %s (attempt %d/%d)", last, attempt + 1, attempts)
                continue
            if response.status_code == 200:
                return
            last = f"HTTP {response.status_code}"
            logger.warning("trainer webhook %s (attempt %d/%d)", last, attempt + 1, attempts)
        raise BackendError(
            "exhausted_retries",
            f"trainer webhook {url} failed after {attempts} attempts ({last}); "
            "step files were written but loop state was not advanced",
            retries=self.webhook_retries,
        )

    def run(self, steps: int) -> list[dict]:
        """Run the requested number of additional steps; returns reports."""
        if steps < 1:
            raise DomainError(f"steps must be >= 1, got {steps}")
        return [self.run_training_step() for _ in range(steps)]
