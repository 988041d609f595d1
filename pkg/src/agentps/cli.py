"""Command-line entry point: ``agentps <command> [options]``.

Every command reads one TOML run config (``--config``), applies ``--set``
overrides and command flags on top, and works inside the run directory::

    <output_dir>/
      manifest.json  config.toml
      data/  annotations/  checkpoints/  logs/  reports/
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, List, Optional, Sequence

from pydantic import ValidationError

from . import __version__
from .ablation import run_ablation, summary_table, write_ablation
from .annotator import agreement, annotate_remote, read_annotations, simulate_annotations, write_annotations
from .assembly import SpecialVocab
from .checkpoint import load_checkpoint
from .config import RunConfig, Settings, load_run_config
from .data import dataset_digest, generate_dataset, read_jsonl, spec_hash, split_dataset, word_pool, write_jsonl
from .errors import AgentPSError, ConfigError, DataError
from .evaluation import evaluate, write_reports, write_scores
from .models import DatasetSpec, Sample
from .network import ModelBundle
from .numerics import Rng
from .training import resolve_labels, train, write_epoch_log

logger = logging.getLogger(__name__)


class RunLayout:
    """Fixed file layout of one run directory."""

    def __init__(self, root: Path):
        self.root = root
        self.manifest = root / "manifest.json"
        self.config_copy = root / "config.toml"
        self.data = root / "data"
        self.annotations = root / "annotations"
        self.checkpoints = root / "checkpoints"
        self.logs = root / "logs"
        self.reports = root / "reports"

    @property
    def train_file(self) -> Path:
        return self.data / "train.jsonl"

    @property
    def test_file(self) -> Path:
        return self.data / "test.jsonl"

    def create(self) -> None:
        for directory in (self.data, self.annotations, self.checkpoints, self.logs, self.reports):
            directory.mkdir(parents=True, exist_ok=True)


class RunContext:
    """Validated config, its verbatim text and the run directory."""

    def __init__(self, config: RunConfig, text: str, overrides: List[str]):
        self.config = config
        self.text = text
        self.overrides = overrides
        self.layout = RunLayout(Path(config.output_dir))

    def archive_config(self) -> None:
        self.layout.create()
        self.layout.config_copy.write_text(self.text, encoding="utf-8")


def build_vocab(config: RunConfig) -> SpecialVocab:
    return SpecialVocab.build(word_pool(), config.questions or [], config.final_question)


def arm_name(variant: str, label_source: str) -> str:
    return variant if label_source == "ground_truth" else f"{variant}-{label_source}"


def _context(args: argparse.Namespace, extra: Sequence[str] = ()) -> RunContext:
    overrides = list(args.set or [])
    if getattr(args, "out", None):
        overrides.append(f"output_dir={json.dumps(str(args.out))}")
    overrides.extend(extra)
    config, text = load_run_config(args.config, overrides)
    return RunContext(config, text, overrides)


def _read_samples(path: Path) -> list[Sample]:
    if not path.exists():
        raise DataError(f"dataset file {path} does not exist; run `agentps generate` first")
    return read_jsonl(path)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def write_dataset(ctx: RunContext, spec: DatasetSpec, force: bool) -> tuple[list[Sample], list[Sample]]:
    layout = ctx.layout
    existing = [p for p in (layout.manifest, layout.train_file, layout.test_file) if p.exists()]
    if existing and not force:
        raise ConfigError(f"{existing[0]} already exists; pass --force to overwrite")

    samples = generate_dataset(spec)
    train_samples, test_samples = split_dataset(samples, spec.test_size)
    ctx.archive_config()
    write_jsonl(train_samples, layout.train_file)
    write_jsonl(test_samples, layout.test_file)
    manifest = {
        "package_version": __version__,
        "seed": spec.seed,
        "dataset": spec.model_dump(mode="json"),
        "spec_hash": spec_hash(spec),
        "n_train": len(train_samples),
        "n_test": len(test_samples),
        "train_sha256": dataset_digest(train_samples),
        "test_sha256": dataset_digest(test_samples),
        "config_sha256": hashlib.sha256(ctx.text.encode("utf-8")).hexdigest(),
        "overrides": ctx.overrides,
    }
    layout.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Wrote %d train / %d test samples to %s", len(train_samples), len(test_samples), layout.data)
    return train_samples, test_samples


def cmd_generate(args: argparse.Namespace) -> None:
    ctx = _context(args)
    spec = ctx.config.dataset
    if args.from_manifest:
        try:
            manifest = json.loads(Path(args.from_manifest).read_text(encoding="utf-8"))
            spec = DatasetSpec.model_validate(manifest["dataset"])
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"cannot read dataset spec from manifest {args.from_manifest}: {exc}") from exc
        if spec_hash(spec) != manifest.get("spec_hash"):
            raise DataError(f"manifest {args.from_manifest} spec hash does not match its dataset section")
    write_dataset(ctx, spec, args.force)
    print(f"spec_hash {spec_hash(spec)}")


# ---------------------------------------------------------------------------
# annotate
# ---------------------------------------------------------------------------


def cmd_annotate(args: argparse.Namespace) -> None:
    ctx = _context(args)
    config = ctx.config
    settings = Settings() if args.mode == "remote" else None
    if settings is not None:
        settings.require_endpoint()

    source = Path(args.input) if args.input else ctx.layout.train_file
    samples = _read_samples(source)
    if args.mode == "simulated":
        results = simulate_annotations(samples, config.noise)
    else:
        results = annotate_remote(samples, config.questions or [], config.final_question, config.remote, settings)

    out = Path(args.output) if args.output else ctx.layout.annotations / f"{args.mode}.jsonl"
    write_annotations(results, out)
    report = agreement(results, samples)
    for i, (acc, missing) in enumerate(zip(report.accuracies, report.missing_rates), start=1):
        logger.info("Question %d: agreement %.4f, missing %.4f", i, acc, missing)
    print(f"wrote {len(results)} {args.mode} annotations to {out}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> None:
    extra = []
    if args.variant:
        extra.append(f"train.variant={args.variant}")
    if args.labels:
        extra.append(f"train.label_source={args.labels}")
    ctx = _context(args, extra)
    config = ctx.config
    tc = config.train
    name = arm_name(tc.variant, tc.label_source)
    ckpt_path = ctx.layout.checkpoints / f"{name}.ckpt"

    samples = _read_samples(Path(args.train_data) if args.train_data else ctx.layout.train_file)
    annotations = None
    if tc.label_source != "ground_truth":
        ann_path = Path(args.annotations) if args.annotations else ctx.layout.annotations / f"{tc.label_source}.jsonl"
        if not ann_path.exists():
            raise DataError(f"annotation file {ann_path} does not exist; run `agentps annotate` first")
        annotations = read_annotations(ann_path)
    labels = resolve_labels(samples, tc.label_source, annotations, tc.annotate_final)

    resume = None
    if args.resume and ckpt_path.exists():
        resume = load_checkpoint(ckpt_path)
        if resume.model.variant != tc.variant:
            raise ConfigError(f"checkpoint {ckpt_path} holds a {resume.model.variant} model")
        model, vocab = resume.model, resume.vocab
    else:
        vocab = build_vocab(config)
        model_config = config.model.model_copy(update={"vocab_size": vocab.size})
        model = ModelBundle.init(model_config, Rng(tc.seed).split("model"))

    ctx.archive_config()
    result = train(model, samples, tc, vocab, labels=labels, checkpoint_path=ckpt_path, resume=resume)
    write_epoch_log(result.logs, ctx.layout.logs / f"{name}-epochs.csv", config.n_questions, append=resume is not None)
    print(f"trained {name} to epoch {result.epoch}; checkpoint {ckpt_path}")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _manifest_n_train(layout: RunLayout) -> int:
    if not layout.manifest.exists():
        return 0
    return int(json.loads(layout.manifest.read_text(encoding="utf-8")).get("n_train", 0))


def cmd_eval(args: argparse.Namespace) -> None:
    ctx = _context(args)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint {ckpt_path} does not exist")
    ckpt = load_checkpoint(ckpt_path)
    samples = _read_samples(Path(args.test_data) if args.test_data else ctx.layout.test_file)
    report, predictions = evaluate(
        ckpt.model,
        samples,
        ckpt.vocab,
        ctx.config.metrics,
        seed=ctx.config.train.seed,
        n_train=_manifest_n_train(ctx.layout),
        label_source=ctx.config.train.label_source,
    )
    stem = ckpt_path.stem
    reports = ctx.layout.reports
    write_reports([report], reports / f"{stem}-metrics.csv", reports / f"{stem}-metrics.json")
    write_scores(predictions, reports / f"{stem}-scores.jsonl")
    print(", ".join(f"{k}={v}" for k, v in report.to_row().items()))


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def cmd_ablate(args: argparse.Namespace) -> None:
    extra = []
    if args.seeds is not None:
        extra.append(f"ablation.seeds={args.seeds}")
    if args.noisy:
        extra.append("ablation.noisy_arm=true")
    if args.workers is not None:
        extra.append(f"ablation.workers={args.workers}")
    ctx = _context(args, extra)
    config = ctx.config
    layout = ctx.layout

    if layout.train_file.exists() and layout.test_file.exists():
        train_samples, test_samples = read_jsonl(layout.train_file), read_jsonl(layout.test_file)
    else:
        train_samples, test_samples = write_dataset(ctx, config.dataset, force=False)
    ctx.archive_config()

    annotations = None
    simulated = layout.annotations / "simulated.jsonl"
    if config.ablation.noisy_arm and simulated.exists():
        annotations = read_annotations(simulated)

    seeds = [config.train.seed + k for k in range(config.ablation.seeds)]
    result = run_ablation(train_samples, test_samples, config, seeds, build_vocab(config), annotations)
    write_ablation(result, layout.reports)
    print(summary_table(result.summary))


# ---------------------------------------------------------------------------
# serve-mock
# ---------------------------------------------------------------------------


def cmd_serve_mock(args: argparse.Namespace) -> None:
    from .mock_server import serve

    replies = None
    if args.replies:
        replies = json.loads(Path(args.replies).read_text(encoding="utf-8"))
        if not isinstance(replies, list) or not all(isinstance(r, str) for r in replies):
            raise ConfigError(f"{args.replies} must hold a JSON list of reply strings")
    serve(args.host, args.port, replies)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 like every other config problem."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML run config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--out", type=Path, default=None, help="run directory (overrides output_dir)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="agentps", description="Process-supervised multimodal classification at desk scale")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="Generate the synthetic train/test sets")
    gen.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    gen.add_argument("--from-manifest", default=None, help="regenerate the dataset recorded in a manifest")
    gen.set_defaults(func=cmd_generate)

    ann = sub.add_parser("annotate", parents=[common], help="Produce process-label annotations")
    ann.add_argument("--mode", choices=["simulated", "remote"], default="simulated")
    ann.add_argument("--input", default=None, help="dataset JSONL (default: run train set)")
    ann.add_argument("--output", default=None, help="annotation JSONL (default: annotations/<mode>.jsonl)")
    ann.set_defaults(func=cmd_annotate)

    tr = sub.add_parser("train", parents=[common], help="Train one variant")
    tr.add_argument("--variant", choices=["vanilla", "multitask", "agentps"], default=None)
    tr.add_argument("--labels", choices=["ground_truth", "simulated", "remote"], default=None)
    tr.add_argument("--annotations", default=None, help="annotation JSONL for non ground-truth labels")
    tr.add_argument("--train-data", default=None, help="dataset JSONL (default: run train set)")
    tr.add_argument("--resume", action="store_true", help="continue from the arm's last checkpoint")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--test-data", default=None, help="dataset JSONL (default: run test set)")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", parents=[common], help="Vanilla vs multitask vs agentps over seeds")
    ab.add_argument("--seeds", type=int, default=None, help="number of seeds")
    ab.add_argument("--noisy", action="store_true", help="add agentps trained on simulated annotations")
    ab.add_argument("--workers", type=int, default=None, help="arms trained in parallel")
    ab.set_defaults(func=cmd_ablate)

    mock = sub.add_parser("serve-mock", parents=[common], help="Serve the scripted annotator endpoint")
    mock.add_argument("--host", default="127.0.0.1")
    mock.add_argument("--port", type=int, default=8000)
    mock.add_argument("--replies", default=None, help="JSON list of canned replies")
    mock.set_defaults(func=cmd_serve_mock)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    func: Callable[[argparse.Namespace], Any] = args.func
    try:
        func(args)
    except AgentPSError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except ValidationError as exc:
        logger.error("invalid configuration: %s", exc)
        return 1
    except FileNotFoundError as exc:
        logger.error("file not found: %s", exc.filename)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
