"""Ranking-correlation study between reconstruction quality and accuracy.

Builds a small locally-trained benchmark of genotypes with ground-truth
accuracies, scores the same genotypes as supernet child models by masked
reconstruction, and measures Kendall's Tau between the two rankings with a
permutation-test p-value.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ImageDataset
from .masking import MaskSpec
from .objective import reconstruction_score
from .search_space import CellSpec, Genotype, sample_genotypes
from .supernet import Supernet, child_weights


class AnalysisError(ValueError):
    pass


def _pair_counts(a: Sequence[float], b: Sequence[float]) -> tuple[int, int, int]:
    """(concordant, discordant, total) pair counts via inversion counting.

    Sorts by `a` and counts inversions of the `b` order with a merge sort,
    so the whole computation is O(n log n) and integer-exact.
    """
    order = sorted(range(len(a)), key=lambda i: a[i])
    seq = [b[i] for i in order]

    def sort_count(xs: list[float]) -> tuple[list[float], int]:
        if len(xs) <= 1:
            return xs, 0
        mid = len(xs) // 2
        left, nl = sort_count(xs[:mid])
        right, nr = sort_count(xs[mid:])
        merged, inv = [], nl + nr
        i = j = 0
        while i < len(left) and j < len(right):
            if left[i] <= right[j]:
                merged.append(left[i])
                i += 1
            else:
                merged.append(right[j])
                j += 1
                inv += len(left) - i
        merged.extend(left[i:])
        merged.extend(right[j:])
        return merged, inv

    _, discordant = sort_count(seq)
    total = len(a) * (len(a) - 1) // 2
    return total - discordant, discordant, total


def kendall_tau(rank_a: Sequence[float], rank_b: Sequence[float]) -> float:
    """(concordant - discordant) / total pairs; requires tie-free inputs."""
    if len(rank_a) != len(rank_b):
        raise AnalysisError(
            f"length mismatch: {len(rank_a)} vs {len(rank_b)}")
    if len(rank_a) < 2:
        raise AnalysisError("need at least 2 items to correlate rankings")
    for name, v in (("rank_a", rank_a), ("rank_b", rank_b)):
        if len(set(v)) != len(v):
            raise AnalysisError(f"{name} contains duplicate scores; break ties first")
    concordant, discordant, total = _pair_counts(list(rank_a), list(rank_b))
    return (concordant - discordant) / total


def permutation_p_value(rank_a: Sequence[float], rank_b: Sequence[float],
                        n_permutations: int = 2000, seed: int = 0,
                        alternative: str = "two-sided") -> float:
    """Permutation-test p-value for the observed tau (add-one smoothed)."""
    observed = kendall_tau(rank_a, rank_b)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A0]))
    b = list(rank_b)
    hits = 0
    for _ in range(n_permutations):
        perm = rng.permutation(len(b))
        tau = kendall_tau(rank_a, [b[i] for i in perm])
        if alternative == "greater":
            hits += tau >= observed
        elif alternative == "two-sided":
            hits += abs(tau) >= abs(observed)
        else:
            raise AnalysisError(f"unknown alternative {alternative!r}")
    return (1 + hits) / (n_permutations + 1)


def ranks_with_id_tiebreak(scores: Sequence[float]) -> tuple[list[int], bool]:
    """Dense ranks (0 = best/highest score); ties broken by model id (index)."""
    had_ties = len(set(scores)) != len(scores)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranks = [0] * len(scores)
    for r, i in enumerate(order):
        ranks[i] = r
    return ranks, had_ties


@dataclass
class MicroBenchEntry:
    genotype: Genotype
    ground_truth_accuracy: float
    reconstruction_score: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "genotype": self.genotype.to_json_dict(),
            "ground_truth_accuracy": self.ground_truth_accuracy,
            "reconstruction_score": self.reconstruction_score,
            "metadata": self.metadata,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MicroBenchEntry":
        return cls(
            genotype=Genotype.from_json_dict(d["genotype"]),
            ground_truth_accuracy=float(d["ground_truth_accuracy"]),
            reconstruction_score=d.get("reconstruction_score"),
            metadata=d.get("metadata", {}))


@dataclass
class RankingReport:
    tau: float
    n_models: int
    p_value: float
    ranking_by_accuracy: list[int]
    ranking_by_score: list[int]
    ties_present: bool = False

    def to_json_dict(self) -> dict:
        return {
            "tau": self.tau,
            "n_models": self.n_models,
            "p_value": self.p_value,
            "ranking_by_accuracy": self.ranking_by_accuracy,
            "ranking_by_score": self.ranking_by_score,
            "ties_present": self.ties_present,
        }


def rank_by_reconstruction(supernet: Supernet, decoder, genotypes: Sequence[Genotype],
                           eval_set: ImageDataset, mask_spec: MaskSpec,
                           mask_seed: int = 0, batch_size: int = 64) -> list[dict]:
    """Score child models (inherited weights) under a shared mask seed.

    Returns one row per genotype, sorted best-first by reconstruction score.
    """
    rows = []
    for model_id, genotype in enumerate(genotypes):
        override = child_weights(supernet, genotype)
        score = reconstruction_score(
            supernet, decoder, eval_set.images, mask_spec, mask_seed,
            weights_override=override, batch_size=batch_size)
        rows.append({"model_id": model_id, "score": score,
                     "n_images": len(eval_set), "mask_seed": mask_seed})
    return sorted(rows, key=lambda r: (-r["score"], r["model_id"]))


def build_micro_bench(space: CellSpec, sample_n: int, dataset: ImageDataset,
                      train_cfg=None, seed: int = 0,
                      wall_time_limit_s: float | None = None) -> tuple[list[MicroBenchEntry], bool]:
    """Sample genotypes and train each from scratch for ground-truth accuracy.

    Deterministic given the seed.  Returns (entries, completed); when the
    wall-time budget runs out the partial list is flagged with
    completed=False.
    """
    from .retrain import RetrainConfig, build_discrete_network, train_from_scratch

    if dataset.labels is None:
        raise AnalysisError("micro-bench training needs a labeled dataset")
    genotypes = sample_genotypes(space, sample_n, seed)
    cfg = train_cfg or RetrainConfig(layers=3, init_channels=8, epochs=4)
    t0 = time.monotonic()
    entries: list[MicroBenchEntry] = []
    completed = True
    for i, genotype in enumerate(genotypes):
        if wall_time_limit_s is not None and time.monotonic() - t0 > wall_time_limit_s:
            completed = False
            break
        entry_cfg = RetrainConfig(**{**cfg.__dict__, "seed": seed * 100003 + i})
        net = build_discrete_network(genotype, entry_cfg, specs={space.cell_kind: space},
                                     num_classes=dataset.num_classes)
        result = train_from_scratch(net, dataset, entry_cfg)
        entries.append(MicroBenchEntry(
            genotype=genotype,
            ground_truth_accuracy=result.best_accuracy,
            metadata={"seed": entry_cfg.seed, "epochs": entry_cfg.epochs,
                      "final_accuracy": result.final_accuracy}))
    return entries, completed


def correlation_report(entries: Sequence[MicroBenchEntry], supernet: Supernet,
                       decoder, eval_set: ImageDataset, mask_spec: MaskSpec,
                       mask_seed: int = 0, n_permutations: int = 2000,
                       seed: int = 0) -> RankingReport:
    """Tau between accuracy ranking and reconstruction-score ranking."""
    if not entries:
        raise AnalysisError("micro-bench is empty")
    scored = rank_by_reconstruction(
        supernet, decoder, [e.genotype for e in entries], eval_set, mask_spec, mask_seed)
    by_id = {row["model_id"]: row["score"] for row in scored}
    scores = [by_id[i] for i in range(len(entries))]
    accs = [e.ground_truth_accuracy for e in entries]
    for e, s in zip(entries, scores):
        e.reconstruction_score = s

    acc_ranks, ties_a = ranks_with_id_tiebreak(accs)
    score_ranks, ties_b = ranks_with_id_tiebreak(scores)
    # Tau over the tie-broken rank vectors; ranks are permutations (tie-free),
    # and negating both vectors leaves tau unchanged.
    tau = kendall_tau(acc_ranks, score_ranks)
    p = permutation_p_value(acc_ranks, score_ranks,
                            n_permutations=n_permutations, seed=seed)
    return RankingReport(
        tau=tau, n_models=len(entries), p_value=p,
        ranking_by_accuracy=acc_ranks, ranking_by_score=score_ranks,
        ties_present=ties_a or ties_b)


def save_bench(entries: Sequence[MicroBenchEntry], path: str | Path,
               completed: bool = True) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps({**e.to_json_dict(), "completed": completed},
                                sort_keys=True) + "\n")


def load_bench(path: str | Path) -> list[MicroBenchEntry]:
    path = Path(path)
    if not path.exists():
        raise AnalysisError(
            f"bench file {path} does not exist; build one with `mimnas bench` first")
    entries = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                entries.append(MicroBenchEntry.from_json_dict(json.loads(line)))
    if not entries:
        raise AnalysisError(f"bench file {path} is empty")
    return entries


def save_report(report: RankingReport, out_dir: str | Path, plot: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ranking_report.json"
    path.write_text(json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n")
    if plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 4))
        ax.bar([0], [report.tau], width=0.5)
        ax.set_ylim(-1, 1)
        ax.set_xticks([0])
        ax.set_xticklabels([f"n={report.n_models}, p={report.p_value:.3f}"])
        ax.set_ylabel("Kendall tau (accuracy vs reconstruction)")
        ax.axhline(0, color="k", linewidth=0.7)
        fig.tight_layout()
        fig.savefig(out / "ranking_tau.png", dpi=120)
        plt.close(fig)
    return path
