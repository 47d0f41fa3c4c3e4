import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from afdm_cpim.afdm import ChirpParams, PermutationIndex
from afdm_cpim.channel import apply_channel, channel_matrix, sample_channel
from afdm_cpim.codebook_design import (
    CodebookDesignProblem,
    DesignMethod,
    build_codebook_objective,
    design_codebook,
    exhaustive_maxmin,
    pairwise_distances,
    rescale_distances,
    sample_pool,
    write_distance_csv,
)
from afdm_cpim.codec import Codebook, Constellation, encode, save_codebook
from afdm_cpim.config import DesignConfig, GasSolveConfig, ObjectiveKind, load_config
from afdm_cpim.detectors import DetectionMethod, detect, residual
from afdm_cpim.errors import BudgetExceededError, ConfigError, NumericalError
from afdm_cpim.gas import build_ml_objective, gas_minimize, write_trace_csv
from afdm_cpim.objective import PolynomialBinaryObjective, exhaustive_minimize
from afdm_cpim.settings import settings
from afdm_cpim.simulation import (
    SimConfig,
    build_codebook,
    config_hash,
    noise_variance_from_ebn0,
    package_version,
    sweep,
    write_ber_csv,
    write_metadata,
    write_reference_csv,
)

logger = logging.getLogger("afdm_cpim.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_NUMERICAL = 4

# Reference minimiser for gas-solve reports stays cheap below this size
_EXHAUSTIVE_REPORT_VARS = 20


def _metadata(command: str, config, started: float, **extra: Any) -> dict[str, Any]:
    return {
        "command": command,
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash(config),
        "seed": config.seed,
        "version": package_version(),
        "wall_time_s": time.perf_counter() - started,
        **extra,
    }


def run_ber_sweep(args: argparse.Namespace, out: Path) -> int:
    started = time.perf_counter()
    config = load_config(SimConfig, args.config, args.override)
    result = sweep(config, jobs=args.jobs)
    write_ber_csv(out / "ber.csv", result.points)
    if result.reference is not None:
        write_reference_csv(out / "reference.csv", result.reference)
    save_codebook(out / "codebook.json", result.experiment.codebook)
    write_metadata(out / "metadata.json", {"command": "ber-sweep", **result.metadata})
    logger.info("wrote %d BER points to %s in %.1f s", len(result.points), out, time.perf_counter() - started)
    return EXIT_OK


def _design_params(config: DesignConfig | GasSolveConfig) -> ChirpParams:
    return ChirpParams.optimal(config.N, config.f_max, config.xi, config.c2)


def run_codebook_design(args: argparse.Namespace, out: Path) -> int:
    started = time.perf_counter()
    config = load_config(DesignConfig, args.config, args.override)
    params = _design_params(config)
    pool = sample_pool(config.N, config.pool_size, np.random.default_rng(config.seed))
    budget = config.subset_budget or settings.SUBSET_BUDGET

    result = design_codebook(
        pool,
        params,
        config.K,
        metric=config.metric,
        method=config.method,
        lambda1=config.lambda1,
        lambda2=config.lambda2,
        gas_config=config.gas,
        budget=budget,
    )
    write_distance_csv(out / "distances.csv", result.distances)
    if result.trace is not None:
        write_trace_csv(out / "trace.csv", result.trace)

    extra: dict[str, Any] = {
        "method": str(result.method),
        "selection": [e.index for e in result.selection.entries],
        "d_min": result.d_min,
        "d_min_rescaled": result.d_min_rescaled,
    }
    if (
        config.cross_check
        and result.method is not DesignMethod.EXHAUSTIVE
        and math.comb(len(pool), config.K) <= budget
    ):
        oracle = exhaustive_maxmin(result.distances, config.K, budget=budget)
        extra["oracle_d_min"] = oracle.d_min
        extra["oracle_selection"] = [e.index for e in oracle.entries]
        logger.info("%s d_min %.6g, exhaustive oracle d_min %.6g", result.method, result.d_min, oracle.d_min)

    if result.selection.size != config.K:
        write_metadata(out / "metadata.json", _metadata("codebook-design", config, started, **extra))
        logger.error(
            "selection holds %d codewords instead of K=%d; no codebook written",
            result.selection.size,
            config.K,
        )
        return EXIT_FAILURE

    save_codebook(
        out / "codebook.json",
        result.codebook(params),
        metric=str(config.metric),
        d_min=result.d_min,
    )
    write_metadata(out / "metadata.json", _metadata("codebook-design", config, started, **extra))
    return EXIT_OK


def run_distance_grid(args: argparse.Namespace, out: Path) -> int:
    started = time.perf_counter()
    config = load_config(DesignConfig, args.config, args.override)
    pool = sample_pool(config.N, config.pool_size, np.random.default_rng(config.seed))
    distances = pairwise_distances(pool, _design_params(config), config.metric)
    write_distance_csv(out / "distances.csv", distances)
    write_metadata(
        out / "metadata.json",
        _metadata("distance-grid", config, started, pool=[p.index for p in pool]),
    )
    return EXIT_OK


def build_gas_objective(config: GasSolveConfig, base_dir: Path) -> PolynomialBinaryObjective:
    match config.objective:
        case ObjectiveKind.TERMS:
            if config.terms_file is None:
                raise ConfigError("objective='terms' needs terms_file")
            path = Path(config.terms_file)
            return PolynomialBinaryObjective.load(path if path.is_absolute() else base_dir / path)
        case ObjectiveKind.CODEBOOK:
            pool = sample_pool(config.N, config.pool_size, np.random.default_rng(config.seed))
            distances = rescale_distances(pairwise_distances(pool, _design_params(config), config.metric))
            problem = CodebookDesignProblem(
                distances, config.K, lambda1=config.lambda1, lambda2=config.lambda2
            )
            return build_codebook_objective(problem)
        case ObjectiveKind.ML:
            params = _design_params(config)
            codebook = Codebook(params, (PermutationIndex(config.perm_index, config.N),))
            constellation = Constellation.from_order(config.M)
            rng = np.random.default_rng(config.seed)
            chan = sample_channel(config.P, config.ell_max, config.f_max, False, rng)
            h = channel_matrix(chan, params.c1, config.N)
            frame = encode(
                rng.integers(0, 2, config.N * constellation.bits_per_symbol, dtype=np.uint8),
                codebook,
                constellation,
            )
            n0 = 0.0 if config.ebn0_db is None else noise_variance_from_ebn0(config.ebn0_db, config.N, config.M, 1)
            r = apply_channel(frame.signal, h, n0, rng)
            obj = build_ml_objective(r, h, codebook.daft(1), constellation)
            obj.metadata["transmitted_bits"] = frame.bits.tolist()
            return obj


def run_gas_solve(args: argparse.Namespace, out: Path) -> int:
    started = time.perf_counter()
    config = load_config(GasSolveConfig, args.config, args.override)
    base_dir = Path(args.config).parent if args.config else Path.cwd()
    obj = build_gas_objective(config, base_dir)
    logger.info("solving %r", obj)

    trace = gas_minimize(obj, config.gas)
    write_trace_csv(out / "trace.csv", trace)
    solution: dict[str, Any] = {
        "bits": trace.best_b.tolist(),
        "value": trace.best_y,
        "oracle_queries": trace.oracle_queries,
        "total_rotations": trace.total_rotations,
        "stop_reason": trace.stop_reason,
    }
    if obj.n_vars <= _EXHAUSTIVE_REPORT_VARS:
        bits, value = exhaustive_minimize(obj)
        solution["exhaustive_bits"] = bits.tolist()
        solution["exhaustive_value"] = value
    if "transmitted_bits" in obj.metadata:
        solution["transmitted_bits"] = obj.metadata["transmitted_bits"]
    with (out / "solution.json").open("w", encoding="utf-8") as fh:
        json.dump(solution, fh, indent=2)
    write_metadata(out / "metadata.json", _metadata("gas-solve", config, started))
    return EXIT_OK


def run_detect_demo(args: argparse.Namespace, out: Path) -> int:
    started = time.perf_counter()
    config = load_config(SimConfig, args.config, args.override)
    codebook = build_codebook(config)
    constellation = Constellation.from_order(config.M)
    ebn0 = config.ebn0_grid_db[-1]
    n0 = (
        config.channel_n0
        if config.channel_n0 is not None
        else noise_variance_from_ebn0(ebn0, config.N, config.M, config.K)
    )
    filter_n0 = config.filter_n0 if config.filter_n0 is not None else n0

    rng = np.random.default_rng(config.seed)
    chan = sample_channel(config.P, config.ell_max, config.f_max, config.fractional_doppler, rng)
    h = channel_matrix(chan, codebook.params.c1, config.N)
    frame = encode(rng.integers(0, 2, config.bits_per_frame, dtype=np.uint8), codebook, constellation)
    r = apply_channel(frame.signal, h, n0, rng)

    lines = [
        f"frame: N={config.N} M={config.M} K={config.K} Eb/N0={ebn0} dB N0={n0:.4g}",
        f"transmitted bits: {''.join(map(str, frame.bits))}",
        f"k*: {frame.perm_choice} (permutation index {codebook.entries[frame.perm_choice - 1].index})",
        "channel paths:",
        *(f"  h={p.gain:.3f} delay={p.delay} doppler={p.doppler:.3f}" for p in chan.paths),
    ]
    budget = config.ml_candidate_budget or settings.ML_CANDIDATE_BUDGET
    agreements: dict[str, bool] = {}
    for method in DetectionMethod:
        if method is DetectionMethod.FULL_ML and codebook.size * constellation.order**config.N > budget:
            lines.append(f"{method}: skipped, K*M^N exceeds the candidate budget of {budget}")
            logger.warning("full_ml skipped: over the candidate budget of %d", budget)
            continue
        if method is DetectionMethod.GAS and config.symbol_bits > settings.EMULATION_MAX_VARS:
            lines.append(
                f"{method}: skipped, {config.symbol_bits} binary variables exceed the emulation "
                f"budget of {settings.EMULATION_MAX_VARS}"
            )
            logger.warning("gas skipped: over the emulation budget")
            continue
        t0 = time.perf_counter()
        result = detect(method, r, h, codebook, constellation, filter_n0, gas_config=config.gas, ml_budget=budget)
        elapsed = time.perf_counter() - t0
        recomputed = residual(r, h, codebook.daft(result.k_hat), result.x_hat)
        agrees = result.k_hat == frame.perm_choice and np.allclose(result.x_hat, frame.symbols)
        agreements[str(method)] = bool(agrees)
        lines += [
            f"{method}: k_hat={result.k_hat} metric={result.metric:.6g} "
            f"(recomputed {recomputed:.6g}) time={elapsed * 1e3:.2f} ms "
            f"agrees_with_truth={agrees}",
            f"  x_hat={np.array2string(result.x_hat, precision=3)}",
        ]

    report = "\n".join(lines)
    print(report)
    (out / "report.txt").write_text(report + "\n", encoding="utf-8")
    write_metadata(out / "metadata.json", _metadata("detect-demo", config, started, agreements=agreements))
    return EXIT_OK


COMMANDS = {
    "ber-sweep": (run_ber_sweep, "Monte Carlo BER sweep over Eb/N0"),
    "codebook-design": (run_codebook_design, "Max-min codebook design"),
    "gas-solve": (run_gas_solve, "Run emulated Grover Adaptive Search on one objective"),
    "detect-demo": (run_detect_demo, "Single seeded frame through every detector"),
    "distance-grid": (run_distance_grid, "Pairwise distance grid of a permutation pool"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="afdm-cpim", description="AFDM chirp-permutation index modulation experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", type=Path, default=None, help="TOML config file")
        cmd.add_argument(
            "--output-dir",
            type=Path,
            default=None,
            help="Output directory (default $AFDM_CPIM_OUTPUT_DIR/<command>)",
        )
        cmd.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Config override applied after the file; repeatable",
        )
        cmd.add_argument("--jobs", type=int, default=None, help="Worker cap for parallel trials")
        cmd.add_argument("--log-level", default=None, help="Logging level (default $AFDM_CPIM_LOG_LEVEL)")
    return parser


def exit_code_for(exc: BaseException) -> int:
    current: BaseException | None = exc
    while current is not None:
        match current:
            case ConfigError():
                return EXIT_CONFIG
            case BudgetExceededError():
                return EXIT_BUDGET
            case NumericalError():
                return EXIT_NUMERICAL
        current = current.__cause__
    return EXIT_FAILURE


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
    args.jobs = max(args.jobs or settings.JOBS, 1)
    out = args.output_dir or Path(settings.OUTPUT_DIR) / args.command
    out.mkdir(parents=True, exist_ok=True)

    handler, _ = COMMANDS[args.command]
    try:
        return handler(args, out)
    except Exception as exc:
        code = exit_code_for(exc)
        if code == EXIT_FAILURE:
            logger.exception("%s failed", args.command)
        else:
            logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
