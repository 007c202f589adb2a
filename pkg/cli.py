import argparse
import os
import sys
import time
from contextlib import contextmanager
from typing import Any, Optional

import dotenv
from pydantic import BaseModel, ValidationError

from capclust import __version__
from capclust.baselines import load_label_file
from capclust.bootstrap import bootstrap_inference
from capclust.components import (
    components_from_payload,
    components_payload,
    dfd_frame,
    extract_components,
    labels_frame,
    loadings_frame,
    polar_frame,
)
from capclust.dataset import center_scale, eigenstructure_agreement, load_any, save_covariances, save_dataset
from capclust.models import BenchmarkConfig, ComponentSet, Dataset, RunConfig, RunManifest, SimConfig, SimGroundTruth
from capclust.pipeline import (
    clustering_frame,
    evaluate_fit,
    load_config,
    recovery_frame,
    run_benchmark,
    selection_frame,
    summarize,
)
from capclust.selection import select_num_clusters
from capclust.simgen import generate_dataset
from capclust.utils.constants import ENV_LOG_LEVEL, ENV_THREADS
from capclust.utils.errors import CapclustError, InvalidInput, NoAcceptedComponents
from capclust.utils.helpers import (
    OutputTracker,
    file_digest,
    format_error_message,
    load_json,
    logger,
    save_csv,
    save_json,
    setup_logging,
    utc_now_iso,
)

dotenv.load_dotenv(dotenv_path=".env")


class Run:
    """Stage timings and input digests of one command, written as manifest.json"""

    def __init__(self, command: str) -> None:
        self.command = command
        self.started = utc_now_iso()
        self.clock = time.perf_counter()
        self.timings: dict[str, float] = {}
        self.digests: dict[str, str] = {}

    @contextmanager
    def stage(self, name: str) -> Any:
        start = time.perf_counter()
        yield
        self.timings[name] = time.perf_counter() - start

    def record_input(self, name: str, path: Optional[str]) -> None:
        if path:
            self.digests[name] = file_digest(path)

    def manifest(self, config: BaseModel, seed: int) -> RunManifest:
        return RunManifest(
            command=self.command,
            config=config.model_dump(mode="json"),
            seed=seed,
            version=__version__,
            input_digests=self.digests,
            started=self.started,
            wall_clock_seconds=time.perf_counter() - self.clock,
            stage_timings=self.timings,
        )


def _env_threads() -> Optional[int]:
    value = os.environ.get(ENV_THREADS)
    if not value:
        return None
    try:
        threads = int(value)
    except ValueError:
        raise InvalidInput(f"{ENV_THREADS} must be an integer, got '{value}'") from None
    if threads < 1:
        raise InvalidInput(f"{ENV_THREADS} must be positive, got {threads}")
    return threads


def _pick(flag: Any, env: Any, current: Any) -> Any:
    if flag is not None:
        return flag
    if env is not None:
        return env
    return current


def _run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < --config JSON < environment < flags"""
    cfg = load_config(args.config, RunConfig, defaults={"em": {"threads": os.cpu_count() or 1}})
    em = cfg.em.model_copy(
        update={
            "threads": _pick(args.threads, _env_threads(), cfg.em.threads),
            "seed": _pick(args.seed, None, cfg.em.seed),
            "n_restarts": _pick(args.restarts, None, cfg.em.n_restarts),
            "dfd_threshold": _pick(getattr(args, "dfd_threshold", None), None, cfg.em.dfd_threshold),
            "max_components": _pick(getattr(args, "max_components", None), None, cfg.em.max_components),
            "progress": args.progress or cfg.em.progress,
        }
    )
    update: dict[str, Any] = {"em": em}
    for name in ("k", "k_min", "k_max", "B", "level", "restarts_per_replicate"):
        value = getattr(args, name, None)
        if value is not None:
            update["bootstrap_B" if name == "B" else name] = value
    if getattr(args, "no_center", False):
        update["center"] = False
    if getattr(args, "no_unit_variance", False):
        update["unit_variance"] = False
    return RunConfig.model_validate({**cfg.model_dump(), **update, "em": em.model_dump()})


def _load_data(args: argparse.Namespace, cfg: RunConfig, run: Run) -> Dataset:
    run.record_input("data", args.data)
    run.record_input("covariates", args.covariates)
    with run.stage("load"):
        d = load_any(args.data, args.covariates)
        if cfg.center and d.has_raw:
            d = center_scale(d, cfg.unit_variance)
        elif cfg.center:
            logger.info("Covariances were given precomputed; centering and scaling skipped")
    return d


def _fit_components(d: Dataset, cfg: RunConfig, run: Run) -> ComponentSet:
    r_max = min(cfg.em.max_components, d.p - 1)
    with run.stage("components"):
        cs = extract_components(d, cfg.k, r_max, cfg.em)
    if cs.r == 0:
        detail = "; ".join(cs.errors) or "no component was fitted"
        raise NoAcceptedComponents(f"no component could be fitted with K={cfg.k}: {detail}")
    return cs


def _write_components(outputs: OutputTracker, cs: ComponentSet, d: Dataset) -> None:
    save_json(components_payload(cs), outputs.path("components.json"))
    save_csv(dfd_frame(cs), outputs.path("dfd_trace.csv"))
    save_csv(labels_frame(cs, d), outputs.path("labels.csv"))
    save_csv(loadings_frame(cs), outputs.path("loadings.csv"))
    save_csv(polar_frame(cs, d), outputs.path("polar.csv"))


def cmd_simulate(args: argparse.Namespace) -> int:
    run = Run("simulate")
    run.record_input("config", args.config)
    cfg = load_config(args.config, SimConfig)
    update = {name: getattr(args, name) for name in ("n", "p", "T", "seed") if getattr(args, name) is not None}
    if args.k is not None:
        update["K"] = args.k
    cfg = SimConfig.model_validate({**cfg.model_dump(), **update})

    with OutputTracker(args.out) as outputs:
        with run.stage("simulate"):
            d, truth = generate_dataset(cfg)
        if args.covariances_only:
            save_covariances(d, outputs.path("covariances.ndjson"), outputs.path("covariates.csv"))
        else:
            save_dataset(d, outputs.path("timeseries.ndjson"), outputs.path("covariates.csv"))
        save_json(truth.model_dump(mode="json"), outputs.path("truth.json"))
        save_json(run.manifest(cfg, cfg.seed).model_dump(mode="json"), outputs.path("manifest.json"))
    logger.info(f"Simulated {d.n} subjects into {args.out}")
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    run = Run("fit")
    run.record_input("config", args.config)
    cfg = _run_config(args)
    d = _load_data(args, cfg, run)

    with OutputTracker(args.out) as outputs:
        cs = _fit_components(d, cfg, run)
        _write_components(outputs, cs, d)
        with run.stage("eigenstructure"):
            save_csv(eigenstructure_agreement(d), outputs.path("eigenstructure.csv"))
        save_json(run.manifest(cfg, cfg.em.seed).model_dump(mode="json"), outputs.path("manifest.json"))
    logger.info(f"Fit {cs.r} components, {cs.n_accepted} accepted")
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    run = Run("select")
    run.record_input("config", args.config)
    cfg = _run_config(args)
    d = _load_data(args, cfg, run)

    with OutputTracker(args.out) as outputs:
        with run.stage("selection"):
            report = select_num_clusters(d, (cfg.k_min, cfg.k_max), cfg.em)
        for message in report.warnings:
            logger.warning(message)
        save_json(report.model_dump(mode="json"), outputs.path("bic.json"))
        save_csv(report.to_frame(), outputs.path("bic.csv"))
        save_json(run.manifest(cfg, cfg.em.seed).model_dump(mode="json"), outputs.path("manifest.json"))
    logger.info(f"Selected K={report.chosen_K}")
    return 0


def cmd_bootstrap(args: argparse.Namespace) -> int:
    run = Run("bootstrap")
    run.record_input("config", args.config)
    cfg = _run_config(args)
    d = _load_data(args, cfg, run)

    with OutputTracker(args.out) as outputs:
        if args.components:
            run.record_input("components", args.components)
            cs = components_from_payload(load_json(args.components))
        else:
            cs = _fit_components(d, cfg, run)
            _write_components(outputs, cs, d)
        with run.stage("bootstrap"):
            report = bootstrap_inference(
                d,
                cs,
                cfg.bootstrap_B,
                cfg.level,
                seed=cfg.em.seed,
                cfg=cfg.em,
                contrasts=cfg.contrasts,
                restarts_per_replicate=cfg.restarts_per_replicate,
            )
        save_json(report.model_dump(mode="json"), outputs.path("bootstrap.json"))
        save_csv(report.to_frame(), outputs.path("bootstrap.csv"))
        save_json(run.manifest(cfg, cfg.em.seed).model_dump(mode="json"), outputs.path("manifest.json"))
    return 0


def _external_labels(specs: list[str], ids: list[str], dims: list[int]) -> dict[str, dict[int, Any]]:
    labels = {}
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise InvalidInput(f"--external-labels expects name=path, got '{spec}'")
        labels[name] = {dim: load_label_file(path, ids, dim) for dim in dims}
    return labels


def cmd_evaluate(args: argparse.Namespace) -> int:
    run = Run("evaluate")
    run.record_input("components", args.components)
    run.record_input("truth", args.truth)
    cfg = _run_config(args)
    cs = components_from_payload(load_json(args.components))
    truth = SimGroundTruth.model_validate(load_json(args.truth))

    extra = {}
    if args.external_labels:
        if not args.data or not args.covariates:
            raise InvalidInput("--external-labels needs --data and --covariates for the subject order")
        d = _load_data(args, cfg, run)
        extra = _external_labels(args.external_labels, d.ids, truth.structured_dims)

    with OutputTracker(args.out) as outputs:
        with run.stage("evaluate"):
            summary = evaluate_fit(cs, truth, extra)
        save_json(summary.model_dump(mode="json"), outputs.path("evaluation.json"))
        save_csv(recovery_frame(summary), outputs.path("recovery.csv"))
        save_csv(clustering_frame(summary), outputs.path("clustering.csv"))
        save_json(run.manifest(cfg, cfg.em.seed).model_dump(mode="json"), outputs.path("manifest.json"))
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    run = Run("benchmark")
    run.record_input("config", args.config)
    cfg = load_config(args.config, BenchmarkConfig, defaults={"threads": os.cpu_count() or 1})
    update: dict[str, Any] = {"threads": _pick(args.threads, _env_threads(), cfg.threads)}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.replications is not None:
        update["replications"] = args.replications
    if args.methods:
        update["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.max_components is not None:
        update["max_components"] = args.max_components
    if args.k_min is not None or args.k_max is not None:
        k_min = args.k_min if args.k_min is not None else 1
        k_max = args.k_max if args.k_max is not None else cfg.sim.K + 2
        update["select_k"] = (k_min, k_max)
    em = cfg.em.model_dump()
    if args.restarts is not None:
        em["n_restarts"] = args.restarts
    if args.dfd_threshold is not None:
        em["dfd_threshold"] = args.dfd_threshold
    cfg = BenchmarkConfig.model_validate({**cfg.model_dump(), **update, "em": em})

    with OutputTracker(args.out) as outputs:
        with run.stage("replications"):
            result = run_benchmark(cfg, progress=args.progress)
        if result.completed == 0:
            raise InvalidInput(f"all {cfg.replications} replications failed: {result.failures[0]}")
        summary = summarize(result)
        save_csv(recovery_frame(summary), outputs.path("recovery.csv"))
        save_csv(clustering_frame(summary), outputs.path("clustering.csv"))
        if cfg.select_k is not None:
            save_csv(selection_frame(result), outputs.path("selection.csv"))
        save_json(result.model_dump(mode="json"), outputs.path("benchmark.json"))
        save_json(run.manifest(cfg, cfg.seed).model_dump(mode="json"), outputs.path("manifest.json"))
    logger.info(f"{result.completed} of {cfg.replications} replications completed, {len(result.failures)} failed")
    return 0


def _add_run_flags(parser: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        parser.add_argument("--data", "-d", type=str, required=True, help="Time-series or covariance NDJSON file")
        parser.add_argument("--covariates", type=str, required=True, help="Covariates CSV file")
    parser.add_argument("--k", type=int, help="Number of clusters")
    parser.add_argument("--max-components", type=int, help="Maximum number of projections to extract")
    parser.add_argument("--dfd-threshold", type=float, help="DfD cut-off for accepting a component")
    parser.add_argument("--no-center", action="store_true", help="Use the data without centering")
    parser.add_argument("--no-unit-variance", action="store_true", help="Center only, do not scale")


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", type=str, help="Path to a JSON configuration file")
    parser.add_argument("--out", "-o", type=str, default="capclust_output", help="Output directory")
    parser.add_argument("--seed", type=int, help="Seed of every random stream")
    parser.add_argument("--threads", type=int, help="Worker threads (default: logical cores)")
    parser.add_argument("--restarts", type=int, help="EM restarts per fit")
    parser.add_argument("--progress", action="store_true", help="Show progress bars")
    parser.add_argument("--log-level", type=str, help="Logging level (default INFO)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Covariate-assisted clustering of subjects from their covariance matrices"
    )
    parser.add_argument("--version", action="version", version=f"capclust {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="Draw a synthetic dataset with known truth")
    _add_common_flags(simulate)
    simulate.add_argument("--n", type=int, help="Number of subjects")
    simulate.add_argument("--p", type=int, help="Number of variables")
    simulate.add_argument("--T", type=int, help="Observations per subject")
    simulate.add_argument("--k", type=int, help="Number of clusters")
    simulate.add_argument("--covariances-only", action="store_true", help="Write covariances instead of time series")
    simulate.set_defaults(handler=cmd_simulate)

    fit = commands.add_parser("fit", help="Extract projections and cluster subjects")
    _add_common_flags(fit)
    _add_run_flags(fit)
    fit.set_defaults(handler=cmd_fit)

    select = commands.add_parser("select", help="Choose the number of clusters by average BIC")
    _add_common_flags(select)
    _add_run_flags(select)
    select.add_argument("--k-min", type=int, help="Smallest candidate K")
    select.add_argument("--k-max", type=int, help="Largest candidate K")
    select.set_defaults(handler=cmd_select)

    bootstrap = commands.add_parser("bootstrap", help="Percentile bootstrap intervals for the coefficients")
    _add_common_flags(bootstrap)
    _add_run_flags(bootstrap)
    bootstrap.add_argument("--components", type=str, help="components.json written by fit")
    bootstrap.add_argument("--B", type=int, help="Number of bootstrap replicates")
    bootstrap.add_argument("--level", type=float, help="Significance level of the intervals")
    bootstrap.add_argument("--restarts-per-replicate", type=int, help="Extra random starts per replicate")
    bootstrap.set_defaults(handler=cmd_bootstrap)

    evaluate = commands.add_parser("evaluate", help="Score fitted components against simulation truth")
    _add_common_flags(evaluate)
    evaluate.add_argument("--components", type=str, required=True, help="components.json written by fit")
    evaluate.add_argument("--truth", type=str, required=True, help="truth.json written by simulate")
    evaluate.add_argument("--data", "-d", type=str, help="Dataset giving the subject order of external labels")
    evaluate.add_argument("--covariates", type=str, help="Covariates CSV file")
    evaluate.add_argument(
        "--external-labels", action="append", default=[], help="name=path of a labels CSV (repeatable)"
    )
    evaluate.set_defaults(handler=cmd_evaluate, no_center=False, no_unit_variance=False)

    benchmark = commands.add_parser("benchmark", help="Monte-Carlo study over simulated replications")
    _add_common_flags(benchmark)
    benchmark.add_argument("--replications", type=int, help="Number of replications")
    benchmark.add_argument("--methods", type=str, help="Comma-separated methods to run")
    benchmark.add_argument("--max-components", type=int, help="Maximum number of projections to extract")
    benchmark.add_argument("--dfd-threshold", type=float, help="DfD cut-off for accepting a component")
    benchmark.add_argument("--k-min", type=int, help="Smallest candidate K of the selection study")
    benchmark.add_argument("--k-max", type=int, help="Largest candidate K of the selection study")
    benchmark.set_defaults(handler=cmd_benchmark)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        setup_logging(args.log_level or os.environ.get(ENV_LOG_LEVEL) or "INFO")
        return args.handler(args)
    except ValidationError as e:
        print(f"Error: invalid configuration: {e.errors()[0]['msg']}", file=sys.stderr)
    except (CapclustError, OSError, ValueError) as e:
        print(format_error_message(e), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
