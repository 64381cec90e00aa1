"""
Extraction CLI
==============
    simulate   scene (mixture + component images + manifest)
    extract    run one algorithm on a mixture, write output + trace + state
    evaluate   Monte-Carlo over seeds: simulate, extract, score -> metrics.csv
    attmap     attenuation map of the final filter (+ optional D&S baseline)

Exit codes: 0 success, 2 configuration / input error, 3 numerical error.

Usage:
    python main.py evaluate --preset room-4x4 --threads 4 --out-dir out/
"""

import argparse
import json
import os
import sys
import tempfile
import time
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger

import config
from extraction_engine import ExtractionEngine, ExtractionResult, reference_filter
from extraction_errors import ConfigError, ExtractionError
from extraction_metrics import (
    GridSpec,
    MetricReport,
    attenuation_at,
    attenuation_map,
    evaluate_extraction,
    evaluate_synthetic,
    fail_rate,
    isinr,
    metrics_table,
)
from mixing_model import ExtractionState
from run_config import RunConfig
from scene_simulator import (
    Scenario,
    SceneMixture,
    SyntheticMixture,
    moving_mixture,
    synthetic_csv_mixture,
    write_json,
    write_scene,
)
from source_model import PilotSignal
from steering_vectors import delay_and_sum, mpdr_pilot, oracle_pilot, point_steering_vector, steering_vector
from stft_service import SpectralTensor, StftConfig, Waveform, analyze, read_wav, write_wav

engine = ExtractionEngine()


# ----------------------------------------------------------------------
# Atomic writers
# ----------------------------------------------------------------------

def write_csv(path: str, df: pd.DataFrame, cfg: RunConfig) -> str:
    """CSV preceded by the `# config=` provenance line."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(suffix=".csv", dir=directory)
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
        f.write(cfg.echo_line() + "\n")
        df.to_csv(f, index=False)
    os.replace(tmp, path)
    return path


def write_state(path: str, state: ExtractionState, cfg: RunConfig) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(suffix=".npz", dir=directory)
    os.close(fd)
    with open(tmp, "wb") as f:
        np.savez(f, w=state.w, a=state.a, sigma=state.sigma, iteration=state.iteration,
                 flags=np.array(state.flags, dtype=str), config=json.dumps(cfg.echo(), default=str))
    os.replace(tmp, path)
    return path


def load_state(path: str) -> ExtractionState:
    with np.load(path) as data:
        return ExtractionState(w=data["w"], a=data["a"], sigma=data["sigma"],
                               iteration=int(data["iteration"]), flags=list(data["flags"]))


# ----------------------------------------------------------------------
# Scene / mixture helpers
# ----------------------------------------------------------------------

def _scenario_kind(cfg: RunConfig) -> str:
    return cfg.section("scenario").get("kind", "room")


def build_scene(cfg: RunConfig, seed: int, base_dir: str = "."):
    scen = cfg.section("scenario")
    if not scen:
        raise cfg.error("a scenario is required", "scenario")
    if _scenario_kind(cfg) == "synthetic_csv":
        return synthetic_csv_mixture(
            n_bins=int(scen.get("n_bins", 8)),
            n_channels=int(scen.get("n_channels", 3)),
            n_blocks=int(scen.get("n_blocks", 3)),
            block_frames=int(scen.get("block_frames", 1000)),
            seed=seed,
        )
    try:
        scenario = Scenario.from_dict(scen, base_dir)
    except ConfigError as exc:
        if exc.field and exc.line is None:
            raise cfg.error(exc.reason, exc.field) from exc
        raise
    return moving_mixture(scenario, seed=seed)


def _mixture_tensor(scene, stft_cfg: StftConfig) -> SpectralTensor:
    if isinstance(scene, SyntheticMixture):
        return scene.x
    return analyze(scene.mixture, stft_cfg)


def build_pilot(cfg: RunConfig, scene, x: SpectralTensor, mics: Optional[np.ndarray] = None) -> Optional[PilotSignal]:
    pilot = cfg.pilot
    kind = pilot["kind"]
    delta = float(pilot["delta"])
    if kind == "none":
        return None
    if kind == "file":
        if "path" not in pilot:
            raise cfg.error("file pilot needs a path", "algorithm.pilot.path")
        if str(pilot["path"]).endswith(".wav"):
            wav = read_wav(pilot["path"], expected_rate=x.sample_rate, field="algorithm.pilot.path")
            return PilotSignal.from_spectrum(analyze(wav, x.stft_config).coeffs, delta)
        return PilotSignal.from_text(pilot["path"], delta)
    if kind == "oracle":
        if scene is None:
            raise cfg.error("oracle pilot needs a simulated scene", "algorithm.pilot.kind")
        if isinstance(scene, SyntheticMixture):
            return oracle_pilot(scene.soi, delta)
        soi = Waveform(scene.truth.images["soi"], x.sample_rate)
        ref = int(cfg.section("algorithm").get("reference_channel", config.REFERENCE_CHANNEL))
        return oracle_pilot(analyze(soi, x.stft_config).coeffs[:, :, ref], delta)
    # mpdr: steered toward a configured point or direction
    if mics is None:
        raise cfg.error("mpdr pilot needs microphone positions", "algorithm.pilot.kind")
    if "point" in pilot:
        d = point_steering_vector(mics, pilot["point"], x.freqs())
    else:
        d = steering_vector(mics, float(pilot.get("azimuth_deg", 0.0)), float(pilot.get("elevation_deg", 0.0)),
                            x.freqs())
    return mpdr_pilot(x, d, delta)


def run_extraction(cfg: RunConfig, scene, algorithm: Optional[str] = None) -> Tuple[ExtractionResult, SpectralTensor]:
    x = _mixture_tensor(scene, cfg.stft)
    mics = None if isinstance(scene, SyntheticMixture) else scene.scenario.mics
    algo_cfg = cfg.algo_config(x.n_frames, mics)
    name = algorithm or cfg.algorithm_name
    pilot = build_pilot(cfg, scene, x, mics) if name.startswith("piloted") else None
    return engine.run(name, x, algo_cfg, pilot), x


# ----------------------------------------------------------------------
# Baseline filters (evaluation sanity anchors)
# ----------------------------------------------------------------------

def baseline_state(kind: str, x: SpectralTensor, n_blocks: int, ref: int) -> ExtractionState:
    """identity: pass the reference channel through, output = x_ref."""
    if kind != "identity":
        raise ConfigError(f"unknown baseline '{kind}'", field="evaluate.filter")
    K, _, d = x.coeffs.shape
    w = np.zeros((K, d), dtype=np.complex128)
    w[:, ref] = 1.0
    a = np.zeros((K, n_blocks, d), dtype=np.complex128)
    a[:, :, ref] = 1.0
    return ExtractionState(w=w, a=a, sigma=np.ones((K, n_blocks)))


def _oracle_report(scene, ref: int, seed: int) -> MetricReport:
    # ground truth as the extracted signal: the SOI image itself, no residual background
    if isinstance(scene, SyntheticMixture):
        soi = scene.soi_image[:, :, ref]
    else:
        soi = scene.truth.images["soi"][:, ref]
    capped: List[str] = []
    bg_in = scene.background_image[:, :, ref] if isinstance(scene, SyntheticMixture) else scene.truth.background[:, ref]
    value = isinr(soi, np.zeros_like(soi), soi, bg_in, capped)
    return MetricReport("oracle", value, value, float("nan"), value < config.FAIL_THRESHOLD_DB, seed,
                        block_isinr_db=[value], capped=capped)


def evaluate_seed(cfg: RunConfig, seed: int, algorithm: str, base_dir: str = ".") -> MetricReport:
    scene = build_scene(cfg, seed, base_dir)
    ref = int(cfg.section("algorithm").get("reference_channel", config.REFERENCE_CHANNEL))
    filt = cfg.section("evaluate").get("filter", "algorithm")

    if filt == "oracle":
        return _oracle_report(scene, ref, seed)
    if filt == "identity":
        x = _mixture_tensor(scene, cfg.stft)
        n_blocks = cfg.algo_config(x.n_frames).n_blocks
        state, name, wall = baseline_state("identity", x, n_blocks, ref), "identity", 0.0
    else:
        result, x = run_extraction(cfg, scene, algorithm)
        state, name, wall = result.state, algorithm, result.wall_time

    if isinstance(scene, SyntheticMixture):
        return evaluate_synthetic(state, scene, ref, name, seed, wall)
    block_len = int(cfg.section("evaluate").get("block_samples", 0)) or None
    return evaluate_extraction(state, scene.truth, cfg.stft, ref, scene.mixture.sample_rate, block_len,
                               name, seed, wall)


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, args) -> int:
    seed = cfg.seeds(args.seed)[0]
    scene = build_scene(cfg, seed, args.base_dir)
    if isinstance(scene, SyntheticMixture):
        path = os.path.join(args.out_dir, "mixture.npz")
        os.makedirs(args.out_dir, exist_ok=True)
        np.savez(path, x=scene.x.coeffs, w_true=scene.w_true, a_true=scene.a_true, sigma2=scene.sigma2,
                 soi=scene.soi, soi_image=scene.soi_image, background_image=scene.background_image,
                 config=json.dumps(cfg.echo(), default=str))
        logger.info(f"[CLI] ✅ synthetic mixture written to {path}")
    else:
        write_scene(args.out_dir, scene, cfg.echo())
    return 0


def cmd_extract(cfg: RunConfig, args) -> int:
    io = cfg.section("io")
    seed = cfg.seeds(args.seed)[0]
    if io.get("input"):
        wave = read_wav(io["input"], field="io.input")
        x = analyze(wave, cfg.stft)
        mics = np.asarray(cfg.section("scenario")["mics"]) if isinstance(cfg.section("scenario").get("mics"), list) else None
        algo_cfg = cfg.algo_config(x.n_frames, mics)
        pilot = build_pilot(cfg, None, x, mics) if cfg.algorithm_name.startswith("piloted") else None
        result = engine.run(cfg.algorithm_name, x, algo_cfg, pilot)
    else:
        scene = build_scene(cfg, seed, args.base_dir)
        result, x = run_extraction(cfg, scene)

    os.makedirs(args.out_dir, exist_ok=True)
    if result.extracted is not None:
        write_wav(os.path.join(args.out_dir, "extracted.wav"), result.extracted)
    write_csv(os.path.join(args.out_dir, "trace.csv"), result.trace, cfg)
    write_state(os.path.join(args.out_dir, "state.npz"), result.state, cfg)
    write_json(os.path.join(args.out_dir, "summary.json"), {
        "config": cfg.echo(),
        "algorithm": result.algorithm,
        "converged": result.converged,
        "n_iter": result.n_iter,
        "wall_time_s": result.wall_time,
        "flags": result.state.flags,
    })
    logger.info(f"[CLI] ✅ extraction written to {args.out_dir}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    seeds = cfg.seeds(args.seed)
    algorithms = cfg.section("evaluate").get("algorithms") or [cfg.algorithm_name]
    jobs = [(seed, algo) for algo in algorithms for seed in seeds]
    logger.info(f"[CLI] 🚀 evaluating {len(algorithms)} algorithm(s) x {len(seeds)} seed(s), {args.threads} thread(s)")

    reports = Parallel(n_jobs=args.threads, prefer="threads")(
        delayed(evaluate_seed)(cfg, seed, algo, args.base_dir) for seed, algo in jobs
    )
    table = metrics_table(reports)
    write_csv(os.path.join(args.out_dir, "metrics.csv"), table, cfg)
    logger.info(f"[CLI] ✅ metrics written, fail rate {fail_rate(reports):.0f}%")
    return 0


def cmd_attmap(cfg: RunConfig, args) -> int:
    seed = cfg.seeds(args.seed)[0]
    if _scenario_kind(cfg) == "synthetic_csv":
        raise cfg.error("attenuation maps need a room scenario", "scenario.kind")
    scene: SceneMixture = build_scene(cfg, seed, args.base_dir)
    att = cfg.section("attmap")
    ref = int(cfg.section("algorithm").get("reference_channel", config.REFERENCE_CHANNEL))
    room, mics = scene.scenario.room, scene.scenario.mics

    if att.get("state"):
        state = load_state(att["state"])
    else:
        state = run_extraction(cfg, scene)[0].state
    filters: Dict[str, np.ndarray] = {"attmap": reference_filter(state, ref)}

    x_freqs = np.arange(cfg.stft.n_bins) * scene.mixture.sample_rate / cfg.stft.fft_len
    if att.get("baseline_point"):
        filters["attmap_dsb"] = delay_and_sum(point_steering_vector(mics, att["baseline_point"], x_freqs))

    dims = room.dimensions
    margin = float(att.get("margin", 0.1))
    grid = GridSpec(
        x_range=tuple(att.get("x_range", [margin, dims[0] - margin])),
        y_range=tuple(att.get("y_range", [margin, dims[1] - margin])),
        z=float(att.get("z", mics[:, 2].mean())),
        spacing=float(att.get("spacing", config.ATTMAP_SPACING)),
    )
    duration = float(att.get("duration", config.ATTMAP_DURATION))
    for name, filt in filters.items():
        amap = attenuation_map(filt, room, mics, grid, seed, cfg.stft, scene.mixture.sample_rate, duration,
                               args.threads)
        write_csv(os.path.join(args.out_dir, f"{name}.csv"), amap.to_frame(), cfg)
        if att.get("points"):
            points = np.asarray(att["points"], dtype=float)
            values = attenuation_at(points, filt, room, mics, cfg.stft, scene.mixture.sample_rate, duration,
                                    seed, args.threads)
            df = pd.DataFrame({"x": points[:, 0], "y": points[:, 1], "z": points[:, 2], "attenuation_db": values})
            write_csv(os.path.join(args.out_dir, f"{name}_points.csv"), df, cfg)
    logger.info(f"[CLI] ✅ attenuation map(s) written to {args.out_dir}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "extract": cmd_extract,
    "evaluate": cmd_evaluate,
    "attmap": cmd_attmap,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Blind extraction of a moving speaker (CSV mixing model)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, help="YAML run configuration")
        p.add_argument("--preset", type=str, help="Bundled preset (room-4x4, grid-move, oracle-csv)")
        p.add_argument("--seed", type=int, default=None, help="Override the configured seed(s)")
        p.add_argument("--threads", type=int, default=config.THREADS, help="Worker threads")
        p.add_argument("--out-dir", type=str, default=config.OUT_DIR, help="Output directory")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logger.remove()
    logger.add(sys.stderr, level=config.LOG_LEVEL)
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}", field="--threads")
        cfg = RunConfig.load(args.config, args.preset)
        args.base_dir = os.path.dirname(os.path.abspath(args.config)) if args.config else "."
        t0 = time.perf_counter()
        code = COMMANDS[args.command](cfg, args)
        logger.info(f"[CLI] {args.command} done in {time.perf_counter() - t0:.1f}s")
        return code
    except ExtractionError as exc:
        logger.error(f"[CLI] ❌ {type(exc).__name__}: {exc}")
        return exc.exit_code
