"""Release gate: ten dynamic checks, one per core guarantee.

Each test prints a single `criterion NN ... PASS/FAIL` line (visible with
`pytest -s`, and mirrored by the verbose test status) and enforces its own
runtime budget where one is stated.
"""

import collections
import itertools
import json
import math
import random
import re
import statistics
import time
from contextlib import contextmanager
from fractions import Fraction

import numpy as np
import pytest

from spell.backends import SimAgentProfile, SimulatedBackend
from spell.batching import (
    ObjectiveGroup,
    QuestionerSample,
    ResponderGroup,
    VerifierGroup,
    build_step_batch,
    group_advantages,
    grpo_objective,
    read_records,
)
from spell.corpus import cluster_documents, dedup_and_decontaminate, exact_jaccard
from spell.evaluation import pass_at_k
from spell.orchestrator import LoopConfig, LoopRunner
from spell.prompts import parse_question_output
from spell.rewards import RewardConfig, majority_vote, questioner_reward, verifier_rewards
from spell.types import RawDocument
from tests.conftest import synthetic_store

_DIFFICULTY_RE = re.compile(r"\[difficulty=([0-9.]+)\]")


@contextmanager
def _criterion(number: int, label: str, budget_s: float | None = None):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"criterion {number:02d} ({label}): FAIL")
        raise
    elapsed = time.perf_counter() - start
    if budget_s is not None:
        assert elapsed < budget_s, f"criterion {number}: {elapsed:.2f}s exceeds {budget_s}s budget"
    print(f"criterion {number:02d} ({label}): PASS in {elapsed:.2f}s")


def test_criterion_01_questioner_reward_shape():
    """Shaped proposal reward: closed form on a dense grid, exact endpoints,
    symmetry, strict unimodality, exact penalty branches."""
    with _criterion(1, "questioner reward shape", budget_s=1.0):
        config = RewardConfig()
        values = []
        for i in range(10_001):
            r = i / 10_000
            got = questioner_reward(r, grounded=True, format_ok=True, config=config)
            if i in (0, 10_000):
                expected = 0.0
            else:
                expected = math.exp(-((r - 0.5) ** 2) / (2.0 * (0.5 / 3.0) ** 2))
            assert abs(got - expected) <= 1e-12, f"grid point {r}: {got} vs {expected}"
            values.append(got)

        assert values[5_000] == 1.0, "peak at one half"
        assert values[0] == 0.0 and values[-1] == 0.0, "exact zeros at the endpoints"

        for i in range(10_001):
            assert abs(values[i] - values[10_000 - i]) <= 1e-12, f"asymmetry at {i}"
        for offset in range(1, 257):
            d = offset / 512.0
            left = questioner_reward(0.5 - d, grounded=True, format_ok=True, config=config)
            right = questioner_reward(0.5 + d, grounded=True, format_ok=True, config=config)
            assert left == right, f"dyadic offset {d} breaks symmetry"

        for i in range(1, 5_001):
            assert values[i] > values[i - 1], f"not strictly increasing at {i}"
        for i in range(5_001, 10_001):
            assert values[i] < values[i - 1], f"not strictly decreasing at {i}"

        assert questioner_reward(0.5, grounded=False, format_ok=True, config=config) == -0.5
        assert questioner_reward(0.5, grounded=True, format_ok=False, config=config) == -1.0
        assert questioner_reward(0.5, grounded=False, format_ok=False, config=config) == -1.0, (
            "format failure outranks grounding failure"
        )


def test_criterion_02_vote_aggregation_exhaustive():
    """Majority vote and per-vote rewards against a brute-force counter for
    every possible 8-vote pattern."""
    with _criterion(2, "vote aggregation", budget_s=1.0):
        for bits in range(2**8):
            votes = [(bits >> j) & 1 for j in range(8)]
            ones = sum(votes)
            expected_majority = 1 if ones > 4 else 0
            assert majority_vote(votes) == expected_majority, f"votes {votes}"
            if ones == 4:
                assert majority_vote(votes) == 0, f"tie must fail: {votes}"
            majority, rewards = verifier_rewards(votes)
            assert majority == expected_majority
            assert rewards == [1 if v == expected_majority else 0 for v in votes], (
                f"votes {votes}"
            )


def test_criterion_03_group_advantages_normalized():
    """Within-group z-scores: zero mean, unit population std, pinned hand value."""
    with _criterion(3, "group advantages"):
        rng = random.Random(103)
        for _ in range(1_000):
            size = rng.randint(2, 16)
            rewards = [rng.gauss(0.0, 2.0) for _ in range(size)]
            advantages = group_advantages(rewards)
            assert abs(statistics.fmean(advantages)) <= 1e-12
            pop_std = math.sqrt(statistics.fmean(a * a for a in advantages))
            assert abs(pop_std - 1.0) <= 1e-9

        hand = group_advantages([1, 1, 0, 0, 0, 0, 0, 0])
        for value in hand[:2]:
            assert abs(value - 1.73205) <= 1e-5, f"positive advantage {value}"
        for value in hand[2:]:
            assert abs(value - (-0.57735)) <= 1e-5, f"negative advantage {value}"


def _naive_objective(groups) -> float:
    totals = []
    for group in groups:
        token_count = sum(len(seq) for seq in group.token_ratios)
        weighted = 0.0
        for ratios, advantage in zip(group.token_ratios, group.advantages):
            for ratio in ratios:
                weighted += advantage * ratio
        totals.append(weighted / token_count)
    return sum(totals) / len(totals)


def test_criterion_04_surrogate_objective():
    """Group-normalized surrogate objective equals a naive double loop, honors
    the unit-ratio special case, and hits the pinned fixture exactly."""
    with _criterion(4, "surrogate objective"):
        rng = random.Random(104)
        for _ in range(1_000):
            groups = []
            for _ in range(rng.randint(1, 3)):
                n_seq = rng.randint(1, 4)
                ratios = tuple(
                    tuple(rng.uniform(0.5, 2.0) for _ in range(rng.randint(1, 6)))
                    for _ in range(n_seq)
                )
                advantages = tuple(rng.gauss(0.0, 1.0) for _ in range(n_seq))
                groups.append(ObjectiveGroup(token_ratios=ratios, advantages=advantages))
            got = grpo_objective(groups)
            assert abs(got - _naive_objective(groups)) <= 1e-12

        for _ in range(200):
            n_seq = rng.randint(1, 5)
            lengths = [rng.randint(1, 7) for _ in range(n_seq)]
            advantages = tuple(rng.gauss(0.0, 1.0) for _ in range(n_seq))
            group = ObjectiveGroup(
                token_ratios=tuple(tuple(1.0 for _ in range(n)) for n in lengths),
                advantages=advantages,
            )
            expected = sum(a * n for a, n in zip(advantages, lengths)) / sum(lengths)
            assert abs(grpo_objective([group]) - expected) <= 1e-12, "unit-ratio reduction"

        fixture = ObjectiveGroup(
            token_ratios=((1.0, 1.0), (1.0, 1.0, 1.0)), advantages=(1.0, -1.0)
        )
        assert grpo_objective([fixture]) == -0.2, "pinned fixture is exact"


def test_criterion_05_pass_at_k_unbiased():
    """pass@k against exhaustive subset enumeration for every n <= 12, Monte
    Carlo agreement, and the pinned point value."""
    with _criterion(5, "pass@k estimator"):
        for n in range(1, 13):
            for c in range(n + 1):
                for k in range(1, n + 1):
                    hits = 0
                    total = 0
                    for subset in itertools.combinations(range(n), k):
                        total += 1
                        hits += any(i < c for i in subset)
                    exact = Fraction(hits, total)
                    got = pass_at_k(n, c, k)
                    assert abs(got - float(exact)) <= 1e-12, f"(n,c,k)=({n},{c},{k})"

        rng = random.Random(105)
        for n, c, k in [(10, 3, 5), (8, 2, 4), (12, 6, 1)]:
            draws = 100_000
            hits = sum(
                1 for _ in range(draws) if any(i < c for i in rng.sample(range(n), k))
            )
            assert abs(hits / draws - pass_at_k(n, c, k)) < 0.01, f"({n},{c},{k})"

        assert abs(pass_at_k(8, 2, 4) - 0.785714) <= 1e-6


def test_criterion_06_sampling_reduction():
    """On a scripted 64-instance step with mixed outcomes, the emitted record
    count lands near one G-th of the raw draw count."""
    with _criterion(6, "sampling reduction", budget_s=10.0):
        G = 8
        que, res, ver = [], [], []
        for i in range(64):
            instance = f"i{i:03d}"
            mixed = i < 32
            if mixed:
                rewards = (1.0,) * 4 + (0.0,) * 4  # rbar 0.5 -> kept
                que_reward = 1.0
                votes = [1, 1, 1, 1, 1, 0, 0, 0]
            else:
                unanimous = 1.0 if i % 2 else 0.0
                rewards = (unanimous,) * G  # zero variance -> discarded
                que_reward = 0.0
                votes = [int(unanimous)] * G
            que.append(
                QuestionerSample(
                    instance_id=instance,
                    cluster_id="c00000",
                    task="general_qa",
                    prompt="propose",
                    completion=f'{{"question": "q{i}?", "answer": "a{i}"}}',
                    reward=que_reward,
                )
            )
            res.append(
                ResponderGroup(
                    instance_id=instance,
                    cluster_id="c00000",
                    task="general_qa",
                    prompt=f"q{i}?",
                    completions=tuple(f"ans{j}" for j in range(G)),
                    rewards=rewards,
                )
            )
            majority = majority_vote(votes)
            for j in range(G):
                ver.append(
                    VerifierGroup(
                        instance_id=instance,
                        response_index=j,
                        cluster_id="c00000",
                        task="general_qa",
                        prompt="compare",
                        completions=tuple(f"v{t}" for t in range(G)),
                        rewards=tuple(float(v == majority) for v in votes),
                        majority=majority,
                        rule_pass=bool(majority),
                    )
                )

        records, report = build_step_batch(1, que, res, ver, random.Random(0))
        raw = sum(report.raw_counts.values())
        assert raw == 64 + 64 * G + 64 * G * G, "raw draw accounting"
        ratio = len(records) / raw
        assert ratio == report.reduction_ratio
        assert 0.10 <= ratio <= 0.20, f"reduction ratio {ratio:.4f} outside [0.10, 0.20]"


def test_criterion_07_corpus_hygiene():
    """Near-duplicate collapse on 100 planted pairs with zero false merges,
    and cluster purity on ten planted centroids."""
    with _criterion(7, "corpus hygiene", budget_s=30.0):
        rng = random.Random(107)
        vocab = [f"tok{i:04d}" for i in range(2_000)]
        docs = []
        for i in range(800):
            words = rng.choices(vocab, k=120)
            docs.append(RawDocument(doc_id=f"u{i:03d}", text=" ".join(words), quality=1.0))
        pair_ids = []
        for i in range(100):
            words = rng.choices(vocab, k=120)
            twin = list(words)
            twin[60] = rng.choice(vocab)  # one edit keeps shingle overlap high
            base_id, twin_id = f"p{i:03d}a", f"p{i:03d}b"
            docs.append(RawDocument(doc_id=base_id, text=" ".join(words), quality=1.0))
            docs.append(RawDocument(doc_id=twin_id, text=" ".join(twin), quality=1.0))
            pair_ids.append((base_id, twin_id))
        rng.shuffle(docs)
        by_id = {doc.doc_id: doc for doc in docs}

        planted = 0
        for base_id, twin_id in pair_ids:
            if exact_jaccard(by_id[base_id].text, by_id[twin_id].text) >= 0.9:
                planted += 1
        assert planted == 100, f"only {planted} pairs verified near-duplicate"

        survivors = {doc.doc_id for doc in dedup_and_decontaminate(docs, threshold=0.8)}
        removed = {doc.doc_id for doc in docs} - survivors
        twin_ids = {twin_id for _, twin_id in pair_ids} | {
            base_id for base_id, _ in pair_ids
        }
        false_merges = removed - twin_ids
        assert not false_merges, f"planted-disjoint docs merged: {sorted(false_merges)[:5]}"
        collapsed = sum(
            1
            for base_id, twin_id in pair_ids
            if len({base_id, twin_id} & survivors) == 1
        )
        assert collapsed >= 95, f"only {collapsed}/100 planted pairs collapsed"

        blob_rng = np.random.default_rng(7)
        embeddings = {}
        labels = {}
        for center in range(10):
            mean = np.zeros(16)
            mean[center] = 10.0
            for j in range(40):
                doc_id = f"b{center}{j:02d}"
                embeddings[doc_id] = (mean + blob_rng.normal(0.0, 0.05, 16)).tolist()
                labels[doc_id] = center
        partition = cluster_documents(embeddings, target_clusters=10, seed=0)
        pure = sum(
            collections.Counter(labels[doc_id] for doc_id in group).most_common(1)[0][1]
            for group in partition
        )
        purity = pure / len(embeddings)
        assert purity >= 0.95, f"cluster purity {purity:.3f} below 0.95"


def _loop_runner(base_dir, *, profile=None, config=None, store=None) -> LoopRunner:
    return LoopRunner(
        store or synthetic_store(),
        SimulatedBackend(profile or SimAgentProfile(seed=5, verifier_accuracy=0.92)),
        config or LoopConfig(batch_size=3, group_size=4, docs_per_question=3, seed=17),
        sink_dir=str(base_dir / "sink"),
        checkpoint_path=str(base_dir / "checkpoint.json"),
    )


def test_criterion_08_run_determinism(tmp_path):
    """Identical seeds give byte-identical 10-step runs, and an interrupted
    run resumed from its checkpoint converges to the same bytes."""
    with _criterion(8, "run determinism", budget_s=120.0):
        for name in ("a", "b"):
            _loop_runner(tmp_path / name).run(10)
        for step in range(1, 11):
            for suffix in (".jsonl", ".report.json"):
                fa = (tmp_path / "a" / "sink" / f"step_{step:06d}{suffix}").read_bytes()
                fb = (tmp_path / "b" / "sink" / f"step_{step:06d}{suffix}").read_bytes()
                assert fa == fb, f"step {step}{suffix} differs between identical runs"

        _loop_runner(tmp_path / "half").run(5)
        resumed = _loop_runner(tmp_path / "half")
        resumed.resume(str(tmp_path / "half" / "checkpoint.json"))
        resumed.run(5)
        for step in range(1, 11):
            for suffix in (".jsonl", ".report.json"):
                fa = (tmp_path / "a" / "sink" / f"step_{step:06d}{suffix}").read_bytes()
                fb = (tmp_path / "half" / "sink" / f"step_{step:06d}{suffix}").read_bytes()
                assert fa == fb, f"resume diverged at step {step}{suffix}"
        ck_a = (tmp_path / "a" / "checkpoint.json").read_bytes()
        ck_half = (tmp_path / "half" / "checkpoint.json").read_bytes()
        assert ck_a == ck_half, "final checkpoints differ after resume"


def test_criterion_09_curriculum_drift(tmp_path, flaky_profile):
    """With a responder that improves and a questioner that escalates with
    exemplars, a 50-step run fills (but never overfills) the history memory,
    raises question difficulty, and keeps questions in the informative band."""
    with _criterion(9, "curriculum drift", budget_s=120.0):
        store = synthetic_store(num_clusters=24, docs_per_cluster=6, seed=0)
        config = LoopConfig(batch_size=4, group_size=8, docs_per_question=3, seed=77)
        runner = _loop_runner(tmp_path, profile=flaky_profile, config=config, store=store)

        memory_sizes = []
        difficulties = []  # one list per step
        mixed_counts = []  # (mixed, total) per step
        for step in range(1, 51):
            report = runner.run_training_step()
            memory_sizes.append(report["memory"]["max_size"])
            step_difficulties = []
            for row in read_records(str(tmp_path / "sink" / f"step_{step:06d}.jsonl")):
                for match in _DIFFICULTY_RE.finditer(row["prompt"] + row["completion"]):
                    step_difficulties.append(float(match.group(1)))
            difficulties.append(step_difficulties)
            histogram = report["rbar_histogram"]
            total = sum(histogram.values())
            mixed = total - histogram.get("0", 0) - histogram.get("8", 0)
            mixed_counts.append((mixed, total))

        assert max(memory_sizes) == 3, "memory never filled to capacity"
        assert all(size <= 3 for size in memory_sizes), "memory exceeded capacity"

        early = [d for step in difficulties[:10] for d in step]
        late = [d for step in difficulties[40:] for d in step]
        assert early and late, "difficulty markers missing from emitted records"
        early_mean = statistics.fmean(early)
        late_mean = statistics.fmean(late)
        assert late_mean > early_mean, (
            f"difficulty did not rise: steps 1-10 mean {early_mean:.4f}, "
            f"steps 41-50 mean {late_mean:.4f}"
        )

        first_mixed = sum(m for m, _ in mixed_counts[:5]) / sum(t for _, t in mixed_counts[:5])
        final_mixed = sum(m for m, _ in mixed_counts[45:]) / sum(t for _, t in mixed_counts[45:])
        assert final_mixed >= first_mixed, (
            f"informative fraction fell: first decile {first_mixed:.3f}, "
            f"final decile {final_mixed:.3f}"
        )


def test_criterion_10_outcome_path_coverage(tmp_path):
    """A scripted backend drives every outcome branch, and each branch leaves
    the right trace in the emitted records."""
    with _criterion(10, "outcome path coverage"):
        profile = SimAgentProfile(
            seed=9, format_break_rate=0.25, parametric_rate=0.35, verifier_accuracy=0.9
        )
        runner = _loop_runner(
            tmp_path,
            profile=profile,
            config=LoopConfig(batch_size=3, group_size=4, docs_per_question=3, seed=17),
        )
        runner.run(4)
        counters = runner.state.counters
        for key in ("format_error", "ungrounded", "solvable"):
            assert counters[key] > 0, f"scripted run never hit the {key} path"
        assert counters["rbar_zero"] + counters["rbar_one"] > 0, (
            "scripted run never produced a zero-variance group"
        )

        rows = []
        for step in range(1, 5):
            rows.extend(read_records(str(tmp_path / "sink" / f"step_{step:06d}.jsonl")))
        que_rows = [row for row in rows if row["role"] == "questioner"]
        rewards = {row["reward"] for row in que_rows}
        assert -1.0 in rewards, "no emitted record carries the format penalty"
        assert -0.5 in rewards, "no emitted record carries the grounding penalty"

        penalized = {row["group_id"] for row in que_rows if row["reward"] in (-1.0, -0.5)}
        for row in rows:
            if row["role"] == "questioner":
                continue
            assert row["group_id"].split(":")[0] not in penalized, (
                f"{row['role']} record emitted for a rejected question"
            )

        positives = {}
        for row in que_rows:
            if row["meta"]["selection"] == "positive" and row["reward"] > 0.0:
                spec = parse_question_output(row["completion"], row["meta"]["task"])
                positives[spec.question] = row["reward"]
        stored = [
            entry
            for memory in runner.state.memories.values()
            for entry in memory.entries()
        ]
        assert stored, "no solvable question was pushed to memory"
        for entry in stored:
            assert entry.question in positives, (
                "memory holds a question that was never emitted as a positive"
            )

        responder_groups = collections.defaultdict(list)
        for row in rows:
            if row["role"] == "responder":
                responder_groups[row["group_id"]].append(row["reward"])
        assert responder_groups, "no responder groups were emitted"
        for group_id, group_rewards in responder_groups.items():
            assert statistics.pstdev(group_rewards) > 0.0, (
                f"zero-variance group {group_id} escaped the discard rule"
            )
