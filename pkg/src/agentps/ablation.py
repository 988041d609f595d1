"""Vanilla / multitask / agentps comparison on identical data.

Every arm of one seed initializes from ``Rng(seed)``, and parameters are drawn
per name, so arms share every common parameter bitwise. Seed-averaged values
are kept in exact decimal tenths of a percent, which makes the gap
decomposition telescope exactly.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from decimal import Decimal
from pathlib import Path
from typing import Mapping, Optional, Sequence

from pydantic import BaseModel

from .annotator import simulate_annotations
from .assembly import SpecialVocab
from .config import RunConfig
from .data import subsample
from .errors import ConfigError, DataError
from .evaluation import evaluate, write_reports
from .models import AnnotationResult, LabelSource, MetricsReport, Sample, TENTH, Variant
from .network import ModelBundle
from .numerics import Rng
from .training import resolve_labels, train

logger = logging.getLogger(__name__)

GAPS: tuple[tuple[str, str, str], ...] = (
    ("multitask-vanilla", "multitask", "vanilla"),
    ("agentps-multitask", "agentps", "multitask"),
    ("agentps-vanilla", "agentps", "vanilla"),
)


class Arm(BaseModel):
    variant: Variant
    label_source: LabelSource = "ground_truth"

    @property
    def name(self) -> str:
        return self.variant if self.label_source == "ground_truth" else f"{self.variant}+{self.label_source}"


class SummaryRow(BaseModel):
    arm: str
    n_train: int
    n_seeds: int
    values: dict[str, Decimal]  # seed-averaged percentages, one decimal
    best: dict[str, bool]


class AblationSummary(BaseModel):
    rows: list[SummaryRow]
    gaps: dict[int, dict[str, dict[str, Decimal]]]  # n_train -> gap name -> column -> points


class AblationResult(BaseModel):
    reports: list[MetricsReport]
    summary: AblationSummary


def check_disjoint(train_samples: Sequence[Sample], test_samples: Sequence[Sample]) -> None:
    shared = {s.id for s in train_samples} & {s.id for s in test_samples}
    if shared:
        raise ConfigError(f"train and test sets share {len(shared)} ids, e.g. {sorted(shared)[0]!r}")


def arms_for(config: RunConfig) -> list[Arm]:
    arms = [Arm(variant=v) for v in config.ablation.variants]
    if config.ablation.noisy_arm:
        arms.append(Arm(variant="agentps", label_source="simulated"))
    return arms


def run_arm(
    config: RunConfig,
    arm: Arm,
    seed: int,
    train_samples: Sequence[Sample],
    test_samples: Sequence[Sample],
    vocab: SpecialVocab,
    annotations: Optional[Mapping[str, AnnotationResult]] = None,
) -> MetricsReport:
    arm_config = config.for_variant(arm.variant, seed=seed, label_source=arm.label_source)
    model_config = arm_config.model.model_copy(update={"vocab_size": vocab.size})
    model = ModelBundle.init(model_config, Rng(seed).split("model"))
    labels = resolve_labels(train_samples, arm.label_source, annotations, arm_config.train.annotate_final)

    logger.info("Arm %s seed=%d n_train=%d: training", arm.name, seed, len(train_samples))
    train(model, train_samples, arm_config.train, vocab, labels=labels)
    report, _ = evaluate(
        model,
        test_samples,
        vocab,
        config.metrics,
        seed=seed,
        n_train=len(train_samples),
        label_source=arm.label_source,
    )
    logger.info("Arm %s seed=%d n_train=%d: F1 %.3f", arm.name, seed, len(train_samples), report.f1)
    return report


def run_ablation(
    train_samples: Sequence[Sample],
    test_samples: Sequence[Sample],
    config: RunConfig,
    seeds: Sequence[int],
    vocab: SpecialVocab,
    annotations: Optional[Mapping[str, AnnotationResult]] = None,
) -> AblationResult:
    """One report per (arm, seed, training size) plus a seed-averaged summary."""
    if not test_samples:
        raise DataError("the ablation needs a nonempty test set")
    check_disjoint(train_samples, test_samples)
    arms = arms_for(config)
    if annotations is None and any(a.label_source != "ground_truth" for a in arms):
        annotations = {r.sample_id: r for r in simulate_annotations(train_samples, config.noise)}

    sizes = config.ablation.train_sizes or [len(train_samples)]
    jobs = []
    for n_train in sizes:
        for seed in seeds:
            subset = (
                list(train_samples)
                if n_train == len(train_samples)
                else subsample(train_samples, n_train, Rng(seed).split(f"subsample-{n_train}"))
            )
            jobs.extend((arm, seed, subset) for arm in arms)

    def work(job: tuple[Arm, int, list[Sample]]) -> MetricsReport:
        arm, seed, subset = job
        return run_arm(config, arm, seed, subset, test_samples, vocab, annotations)

    with ThreadPoolExecutor(max_workers=config.ablation.workers) as pool:
        reports = list(pool.map(work, jobs))
    return AblationResult(reports=reports, summary=summarize(reports))


def summarize(reports: Sequence[MetricsReport]) -> AblationSummary:
    groups: dict[tuple[int, str], list[MetricsReport]] = {}
    for report in reports:
        groups.setdefault((report.n_train, report.arm), []).append(report)

    rows: list[SummaryRow] = []
    for (n_train, arm), members in groups.items():
        columns: dict[str, list[Decimal]] = {}
        for report in members:
            for name, value in report.to_row().items():
                if name not in ("variant", "seed"):
                    columns.setdefault(name, []).append(Decimal(value))
        means = {name: (sum(vals) / len(vals)).quantize(TENTH) for name, vals in columns.items()}
        rows.append(SummaryRow(arm=arm, n_train=n_train, n_seeds=len(members), values=means, best={}))

    for row in rows:
        peers = [r for r in rows if r.n_train == row.n_train]
        row.best = {
            name: value == max(p.values[name] for p in peers if name in p.values)
            for name, value in row.values.items()
        }

    gaps: dict[int, dict[str, dict[str, Decimal]]] = {}
    for n_train in sorted({r.n_train for r in rows}):
        by_arm = {r.arm: r.values for r in rows if r.n_train == n_train}
        for gap, high, low in GAPS:
            if high in by_arm and low in by_arm:
                shared = [c for c in by_arm[low] if c in by_arm[high]]
                gaps.setdefault(n_train, {})[gap] = {c: by_arm[high][c] - by_arm[low][c] for c in shared}
    return AblationSummary(rows=rows, gaps=gaps)


def summary_table(summary: AblationSummary) -> str:
    """Plain-text table; best values per column carry a ``*``."""
    columns: list[str] = []
    for row in summary.rows:
        columns.extend(c for c in row.values if c not in columns)
    lines = ["\t".join(["arm", "n_train", *columns])]
    for row in summary.rows:
        cells = [f"{row.values[c]}{'*' if row.best.get(c) else ''}" if c in row.values else "" for c in columns]
        lines.append("\t".join([row.arm, str(row.n_train), *cells]))
    return "\n".join(lines)


def write_ablation(result: AblationResult, reports_dir: Path) -> None:
    reports_dir.mkdir(parents=True, exist_ok=True)
    write_reports(result.reports, reports_dir / "ablation.csv", reports_dir / "ablation.json")
    (reports_dir / "summary.json").write_text(
        result.summary.model_dump_json(indent=2) + "\n", encoding="utf-8"
    )
    (reports_dir / "summary.txt").write_text(summary_table(result.summary) + "\n", encoding="utf-8")
    logger.info("Wrote ablation summary to %s", reports_dir / "summary.json")


def load_summary(path: Path) -> AblationSummary:
    return AblationSummary.model_validate(json.loads(path.read_text(encoding="utf-8")))
