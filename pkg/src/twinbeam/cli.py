"""Command-line interface: reproducible experiments from TOML configs.

Subcommands
-----------
simulate   config -> FrameSet (binary .tbfs, or long-format CSV with --format csv)
estimate   FrameSet + config -> JSON report, CSV tables, figures
predict    config -> analytic CSV table
calibrate  recorded calibration data + config -> efficiency report
sweep      config sweep axis -> measured-vs-predicted CSV and figure
verify     run the acceptance suite

Every run is pinned to a master seed (--seed or [run].seed) and the SHA-256
of its config; both land in every output file.  Frame generation is chunked
with one spawned stream per chunk, so --threads changes wall time only,
never a single byte of output.

Exit codes: 0 success, 2 configuration or domain error, 3 data error,
4 statistical check failure.
"""
from __future__ import annotations

import argparse
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    CoincidenceRecord,
    EmGainModel,
    PnrHistograms,
    analog_calibration,
    emccd_threshold_calibration,
    klyshko_efficiency,
    pnr_efficiencies,
    predicted_threshold_efficiency,
    simulate_emccd_pair,
    simulate_klyshko,
    simulate_pnr,
)
from .config import (
    config_hash,
    layout_from_config,
    load_config,
    optional,
    require,
    resolve_seed,
    source_from_config,
)
from .core import detected_moments, simulate_pair_series
from .errors import DataError, DomainError, StatisticalCheckError
from .estimators import (
    cauchy_schwarz,
    fano,
    nrf,
    nrf_alpha_grid,
    nrf_grid,
    population_value,
)
from .frames import NO_CONFIG, FrameSet
from .geometry import (
    ModeLayout,
    bin_grid,
    collection_efficiency,
    cross_correlation_map,
    predicted_nrf,
    synthesize_layout_frames,
)
from .ghost import (
    GiObject,
    GiRun,
    arm_mu,
    enhancement_from_counts,
    export_map_csv,
    measure_gi_snr,
    normalized_image,
    predicted_enhancement,
    predicted_gi_snr,
    simulate_gi,
    snr_large_mu_limit,
    summarize,
)
from .illumination import (
    QiScenario,
    epsilon_crossing,
    epsilon_sweep,
    nonclassicality_boundary,
    predicted_epsilon,
    predicted_qi_snr,
    qi_enhancement,
)
from .imaging import (
    SCHEMES,
    AbsorptionObject,
    binning_sweep,
    bin_mask,
    estimate_alpha,
    measure_reference,
    phi_mask,
    pi_mask,
    predicted_alpha_uncertainty,
    simulate_imaging,
    snr_ratio,
)
from .reports import estimate_as_dict, write_report, write_table
from .rng import frame_chunks, stream

PROTOCOLS = ("statistics", "imaging", "qi", "ghost", "calibration")


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _require_config(args) -> tuple[dict, bytes]:
    if args.config is None:
        raise DomainError("this command needs --config")
    cfg = load_config(args.config)
    return cfg, config_hash(cfg)


def _protocol(cfg: dict) -> str:
    proto = require(cfg, "run.protocol", str)
    if proto not in PROTOCOLS:
        raise DomainError(f"run.protocol must be one of {PROTOCOLS}, got {proto!r}")
    return proto


def _frames_count(cfg: dict) -> int:
    k = require(cfg, "run.frames", int)
    if k < 1:
        raise DomainError(f"run.frames must be >= 1, got {k}")
    return k


def _grid_from(cfg: dict, key: str, default) -> tuple[int, int]:
    val = optional(cfg, key, default)
    ok = (isinstance(val, (list, tuple)) and len(val) == 2
          and all(isinstance(v, int) and not isinstance(v, bool) and v > 0
                  for v in val))
    if not ok:
        raise DomainError(f"config key '{key}' must be [height, width]")
    return int(val[0]), int(val[1])


def _etas(cfg: dict) -> tuple[float, float]:
    eta1 = float(require(cfg, "detector.eta1", float))
    eta2 = float(optional(cfg, "detector.eta2", eta1))
    return eta1, eta2


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _plots(args):
    if args.no_plot:
        return None
    from . import plots
    return plots


def _load_frameset(path, expected_hash: bytes | None = None) -> FrameSet:
    try:
        return FrameSet.load(path, expected_hash=expected_hash)
    except OSError as exc:
        raise DataError(f"cannot read FrameSet {path}: {exc}") from None


def _chunk_map(k: int, threads: int, worker):
    """Run worker(chunk_index, n_frames) over canonical chunks, in order.

    Chunk boundaries and per-chunk streams are fixed by the frame count
    alone, so any thread count produces identical output.
    """
    jobs = [(i, stop - start) for i, start, stop in frame_chunks(k)]
    if threads <= 1:
        return [worker(i, n) for i, n in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: worker(*job), jobs))


def _synthesize_pair(layout: ModeLayout, mu: float, grid, k: int, seed: int,
                     lane: int, threads: int, eta1: float, eta2: float):
    parts = _chunk_map(k, threads, lambda i, n: synthesize_layout_frames(
        layout, mu, grid, n, stream(seed, lane, i), eta1, eta2))
    return (np.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]))


def _fmt_report(rep) -> str:
    parts = [f"{rep.name}: {rep.value:.6g}"]
    if math.isfinite(rep.standard_error):
        parts.append(f"+/- {rep.standard_error:.2g}")
    if rep.analytic_prediction is not None and rep.status == "ok":
        parts.append(f"(predicted {rep.analytic_prediction:.6g}, "
                     f"{rep.deviation_sigma():+.1f} SE)")
    if rep.status != "ok":
        parts.append(f"[{rep.status}]")
    return "  ".join(parts)


def _provenance(seed: int, digest: bytes, **extra) -> dict:
    prov = {"seed": seed, "config_hash": digest.hex()}
    prov.update(extra)
    return prov


# ---------------------------------------------------------------------------
# Object builders from config tables
# ---------------------------------------------------------------------------

def _imaging_object(cfg: dict) -> tuple[AbsorptionObject, np.ndarray | None]:
    """(object, boolean mask or None) from the [imaging] table."""
    grid = _grid_from(cfg, "imaging.grid", [48, 48])
    alpha = float(require(cfg, "imaging.alpha", float))
    kind = str(optional(cfg, "imaging.mask", "uniform"))
    if kind == "uniform":
        return AbsorptionObject(np.full(grid, alpha)), None
    stroke = int(optional(cfg, "imaging.stroke", 6))
    if kind == "phi":
        mask = phi_mask(grid, stroke)
    elif kind == "pi":
        mask = pi_mask(grid, stroke)
    else:
        raise DomainError(f"imaging.mask must be uniform|phi|pi, got {kind!r}")
    return AbsorptionObject(np.where(mask, alpha, 0.0)), mask


def _ghost_object(cfg: dict) -> GiObject:
    grid = _grid_from(cfg, "ghost.grid", [16, 16])
    kind = str(optional(cfg, "ghost.object", "two_level"))
    t_high = float(optional(cfg, "ghost.t_high", 1.0))
    if kind == "uniform":
        return GiObject.uniform(grid, t_high)
    if kind != "two_level":
        raise DomainError(f"ghost.object must be uniform|two_level, got {kind!r}")
    side = int(optional(cfg, "ghost.low_size", grid[0] // 2))
    if not 0 < side <= min(grid):
        raise DomainError(f"ghost.low_size must be in [1, {min(grid)}], got {side}")
    mask = np.zeros(grid, dtype=bool)
    r0, c0 = (grid[0] - side) // 2, (grid[1] - side) // 2
    mask[r0:r0 + side, c0:c0 + side] = True
    return GiObject.two_level(grid, mask, t_high,
                              float(optional(cfg, "ghost.t_low", 0.0)))


def _qi_scenario(cfg: dict) -> QiScenario:
    return QiScenario(
        kind=str(optional(cfg, "qi.kind", "twin_beam")),
        probe_photons=float(optional(cfg, "qi.probe_photons", 4.0)),
        modes=float(optional(cfg, "qi.modes", 40.0)),
        background_photons=float(optional(cfg, "qi.background_photons", 30.0)),
        background_modes=float(optional(cfg, "qi.background_modes", 100.0)),
        target_reflectivity=float(optional(cfg, "qi.target_reflectivity", 0.5)),
        reference_efficiency=float(optional(cfg, "qi.reference_efficiency", 0.9)),
        target_present=bool(optional(cfg, "qi.target_present", True)),
        pixel_pairs=int(optional(cfg, "qi.pixel_pairs", 80)),
    )


def _gain_model(cfg: dict) -> EmGainModel:
    return EmGainModel(float(require(cfg, "calibration.gain", float)),
                       float(require(cfg, "calibration.read_noise", float)))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _simulate_statistics(cfg, seed, k, threads) -> np.ndarray:
    eta1, eta2 = _etas(cfg)
    if optional(cfg, "geometry") is not None:
        layout = layout_from_config(cfg)
        mu = float(require(cfg, "source.mu", float))
        grid = _grid_from(cfg, "geometry.grid", [64, 64])
        f1, f2 = _synthesize_pair(layout, mu, grid, k, seed, 0, threads,
                                  eta1, eta2)
        return np.stack([f1, f2], axis=1)
    src = source_from_config(cfg)
    parts = _chunk_map(k, threads, lambda i, n: simulate_pair_series(
        src, eta1, eta2, n, stream(seed, 0, i)))
    n1 = np.concatenate([p[0] for p in parts])
    n2 = np.concatenate([p[1] for p in parts])
    return np.stack([n1, n2], axis=1).reshape(k, 2, 1, 1)


def _simulate_imaging(cfg, seed, k, threads) -> np.ndarray:
    src = source_from_config(cfg)
    obj, _ = _imaging_object(cfg)
    scheme = str(require(cfg, "imaging.scheme", str))
    eta1, eta2 = _etas(cfg)
    layout = layout_from_config(cfg) if optional(cfg, "geometry") is not None \
        else None
    parts = _chunk_map(k, threads, lambda i, n: simulate_imaging(
        src, obj, scheme, eta1, eta2, n, stream(seed, 0, i),
        layout=layout).frames)
    return np.concatenate(parts)


def _simulate_ghost(cfg, seed, k, threads) -> np.ndarray:
    src = source_from_config(cfg)
    obj = _ghost_object(cfg)
    t1 = float(optional(cfg, "ghost.t1", 1.0))

    def worker(i, n):
        run = simulate_gi(src, obj, t1, n, stream(seed, 0, i),
                          keep_probe=True)
        return run.reference, run.probe

    parts = _chunk_map(k, threads, worker)
    ref = np.concatenate([p[0] for p in parts])
    probe = np.concatenate([p[1] for p in parts])
    return np.stack([ref, probe], axis=1)


def _simulate_qi(cfg, seed, k, threads) -> np.ndarray:
    from .illumination import simulate_qi_shots
    scenario = _qi_scenario(cfg)
    parts = _chunk_map(k, threads, lambda i, n: simulate_qi_shots(
        scenario, n, stream(seed, 0, i)))
    n1 = np.concatenate([p[0] for p in parts])
    n2 = np.concatenate([p[1] for p in parts])
    return np.stack([n1, n2], axis=1)[:, :, None, :]


def _simulate_calibration(cfg, seed, k, threads, out: Path,
                          digest: bytes) -> Path | None:
    """Method-specific artifacts; returns a FrameSet path when one is made."""
    method = str(require(cfg, "calibration.method", str))
    prov = _provenance(seed, digest, method=method)
    if method == "klyshko":
        rec = simulate_klyshko(
            float(require(cfg, "calibration.eta1", float)),
            float(require(cfg, "calibration.eta2", float)),
            float(require(cfg, "calibration.tau", float)),
            float(require(cfg, "calibration.pair_rate", float)),
            float(optional(cfg, "calibration.noise1", 0.0)),
            float(optional(cfg, "calibration.noise2", 0.0)),
            k, stream(seed, 0),
            pair_dist=str(optional(cfg, "calibration.pair_dist", "bernoulli")))
        rec.save_csv(out / "coincidences.csv", prov)
        print(f"wrote {out / 'coincidences.csv'} ({k} windows)")
        return None
    if method == "pnr":
        hist = simulate_pnr(
            float(require(cfg, "calibration.efficiency", float)),
            float(require(cfg, "calibration.herald_purity", float)),
            k, k, stream(seed, 0),
            background=(str(optional(cfg, "calibration.background", "poisson")),
                        float(optional(cfg, "calibration.background_mean", 1.0))))
        hist.save_csv(out / "pnr_histograms.csv", prov)
        print(f"wrote {out / 'pnr_histograms.csv'} ({k} draws per histogram)")
        return None
    layout = layout_from_config(cfg)
    mu = float(require(cfg, "source.mu", float))
    grid = _grid_from(cfg, "geometry.grid", [16, 16])
    if method == "analog":
        eta = float(require(cfg, "calibration.efficiency", float))
        f1, f2 = _synthesize_pair(layout, mu, grid, k, seed, 0, threads,
                                  eta, eta)
        frames = np.stack([f1, f2], axis=1)
    elif method == "emccd":
        model = _gain_model(cfg)
        base = float(require(cfg, "calibration.efficiency", float))

        def worker(i, n):
            return simulate_emccd_pair(layout, mu, grid, n, model, base,
                                       stream(seed, 0, i))

        parts = _chunk_map(k, threads, worker)
        adu1 = np.concatenate([p[0] for p in parts])
        adu2 = np.concatenate([p[1] for p in parts])
        # ADU leave the detector as integers; the model works on electrons
        frames = np.rint(np.stack([adu1, adu2], axis=1)).astype(np.int32)
    else:
        raise DomainError(
            f"calibration.method must be klyshko|pnr|analog|emccd, got {method!r}")
    return _write_frames(FrameSet(frames, seed, digest), out, "native")


def _write_frames(fs: FrameSet, out: Path, fmt: str) -> Path:
    if fmt == "native":
        path = out / "frames.tbfs"
        fs.save(path)
    else:
        path = out / "frames.csv"
        fs.to_csv(path)
    h, w = fs.grid
    print(f"wrote {path} (K={fs.n_frames}, {fs.channels}x{h}x{w}, "
          f"seed {fs.seed})")
    return path


def cmd_simulate(args) -> int:
    cfg, digest = _require_config(args)
    seed = resolve_seed(cfg, args.seed)
    proto = _protocol(cfg)
    k = _frames_count(cfg)
    out = _outdir(args)
    if proto == "calibration":
        _simulate_calibration(cfg, seed, k, args.threads, out, digest)
        return 0
    builders = {
        "statistics": _simulate_statistics,
        "imaging": _simulate_imaging,
        "ghost": _simulate_ghost,
        "qi": _simulate_qi,
    }
    frames = builders[proto](cfg, seed, k, args.threads)
    if frames.dtype.kind not in "ui":
        frames = frames.astype(np.uint32)
    _write_frames(FrameSet(frames, seed, digest), out, args.format)
    return 0


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def _estimate_statistics(cfg, fs: FrameSet, out, plots, seed, digest) -> dict:
    if fs.channels != 2:
        raise DataError("statistics estimation needs a two-channel FrameSet")
    eta1, eta2 = _etas(cfg)
    if fs.grid == (1, 1):
        x, y = fs.series().T
        src = source_from_config(cfg)
        jm = detected_moments(src, eta1, eta2)
        reports = [
            nrf(x, y, prediction=population_value("NRF", jm)),
            fano(x, prediction=jm.arm1.fano()),
            fano(y, prediction=jm.arm2.fano()),
            cauchy_schwarz(x, y,
                           prediction=population_value("CauchySchwarz", jm)),
        ]
    else:
        layout = layout_from_config(cfg)
        mu = float(require(cfg, "source.mu", float))
        a = collection_efficiency(layout, mu)
        f1, f2 = fs.pair()
        balanced = predicted_nrf(eta1, a) if eta1 == eta2 else None
        reports = [
            nrf_grid(f1, f2, prediction=balanced),
            nrf_alpha_grid(f1, f2),
        ]
        corr = cross_correlation_map(f1, f2)
        export_map_csv(corr, out / "correlation_map.csv",
                       _provenance(seed, digest, content="cross-correlation"))
        if plots:
            plots.save_map(out / "correlation_map.png", corr,
                           title="pixel cross-correlation",
                           value_label="covariance")
    for rep in reports:
        print(_fmt_report(rep))
    return {"reports": [estimate_as_dict(r) for r in reports]}


def _estimate_imaging(cfg, fs: FrameSet, out, plots, seed, digest,
                      reference_path) -> dict:
    scheme = str(require(cfg, "imaging.scheme", str))
    if scheme not in SCHEMES:
        raise DomainError(f"imaging.scheme must be one of {SCHEMES}")
    d = int(optional(cfg, "imaging.binning", 1))
    probe = fs.channel(0)
    ref_arm = fs.channel(1) if fs.channels == 2 else None
    if reference_path is not None:
        ref_frames = _load_frameset(reference_path).channel(0)
    elif ref_arm is not None:
        # the undisturbed reference arm doubles as the no-object flux monitor
        ref_frames = ref_arm
    else:
        raise DataError("direct scheme needs --reference (a no-object run)")
    if d > 1:
        probe = bin_grid(probe, d)
        ref_frames = bin_grid(ref_frames, d)
        ref_arm = bin_grid(ref_arm, d) if ref_arm is not None else None
    reference = measure_reference(ref_frames)
    image = estimate_alpha((probe, ref_arm), scheme, reference, binning=d)

    rows = [(i, j, float(image.alpha_hat[i, j]), float(image.std_error[i, j]))
            for i in range(image.alpha_hat.shape[0])
            for j in range(image.alpha_hat.shape[1])]
    write_table(out / "alpha_map.csv", ("row", "col", "alpha", "std_error"),
                rows, _provenance(seed, digest, scheme=scheme, binning=d))
    if plots:
        plots.save_alpha_image(out / "alpha_map.png", image.alpha_hat,
                               title=f"{scheme} absorption estimate (d={d})")
    body = {
        "scheme": scheme,
        "binning": d,
        "mean_alpha": float(image.alpha_hat.mean()),
        "mean_std_error": float(image.std_error.mean()),
        "reference_mean": float(np.mean(reference.mean)),
    }
    _, mask = _imaging_object(cfg)
    if mask is not None:
        mask_d = bin_mask(mask, d) if d > 1 else mask
        z = image.region_z(mask_d)
        body["region_z"] = z
        body["detected"] = bool(image.detects(mask_d))
        print(f"region z-score: {z:.2f} ({'detected' if body['detected'] else 'not detected'})")
    print(f"alpha: mean {body['mean_alpha']:.5g}, "
          f"per-pixel SE {body['mean_std_error']:.3g}")
    return body


def _estimate_ghost(cfg, fs: FrameSet, out, plots, seed, digest) -> dict:
    if fs.channels != 2:
        raise DataError("ghost estimation needs reference+probe channels")
    src = source_from_config(cfg)
    obj = _ghost_object(cfg)
    t1 = float(optional(cfg, "ghost.t1", 1.0))
    ref, probe = fs.pair()
    run = GiRun(reference=ref, bucket=probe.sum(axis=(1, 2), dtype=np.int64),
                source=src, t1=t1, transmission=obj.transmission, probe=probe)
    summary = summarize(run)
    image = normalized_image(summary)
    high, low = obj.region_masks()
    variance = str(optional(cfg, "ghost.variance", "product"))
    snr = measure_gi_snr(summary, high, low, variance=variance)
    pred = predicted_gi_snr(obj, arm_mu(src), t1, fs.n_frames)
    predicted = pred.twin_beam if src.kind == "twin_beam" else pred.thermal
    g = enhancement_from_counts(t1, src.modes, float(summary.n1_mean.mean()))

    export_map_csv(summary.s_map, out / "gi_map.csv",
                   _provenance(seed, digest, content="bucket covariance"))
    if plots:
        plots.save_map(out / "gi_map.png", image,
                       title="normalized ghost image",
                       value_label="relative transmission")
    body = {
        "snr": snr.value, "snr_se": snr.standard_error,
        "snr_predicted": predicted,
        "variance_method": snr.variance_method,
        "enhancement": g,
        "enhancement_predicted": predicted_enhancement(arm_mu(src)),
        "mean_high": snr.mean_high, "mean_low": snr.mean_low,
    }
    print(f"GI SNR: {snr.value:.4g} +/- {snr.standard_error:.2g} "
          f"(predicted {predicted:.4g})")
    print(f"enhancement G: {g:.4g} "
          f"(predicted {body['enhancement_predicted']:.4g})")
    return body


def _estimate_qi(cfg, fs: FrameSet, out, plots, seed, digest) -> dict:
    if fs.channels != 2 or fs.grid[0] != 1:
        raise DataError("qi estimation needs a (K, 2, 1, pairs) FrameSet")
    scenario = _qi_scenario(cfg)
    probe, reference = fs.pair()
    rep = cauchy_schwarz(probe.ravel(), reference.ravel(),
                         prediction=predicted_epsilon(scenario))
    boundary = nonclassicality_boundary(scenario)
    mu = scenario.probe_photons / scenario.modes
    body = {
        "epsilon": estimate_as_dict(rep),
        "boundary_background": boundary,
        "snr_enhancement_predicted": qi_enhancement(mu),
    }
    print(_fmt_report(rep))
    print(f"nonclassicality boundary: n_B* = {boundary:.4g}")
    return body


def cmd_estimate(args) -> int:
    cfg, digest = _require_config(args)
    proto = _protocol(cfg)
    fs = _load_frameset(args.frames,
                        expected_hash=None if args.no_check else digest)
    out = _outdir(args)
    plots = _plots(args)
    if proto == "statistics":
        body = _estimate_statistics(cfg, fs, out, plots, fs.seed, digest)
    elif proto == "imaging":
        body = _estimate_imaging(cfg, fs, out, plots, fs.seed, digest,
                                 args.reference)
    elif proto == "ghost":
        body = _estimate_ghost(cfg, fs, out, plots, fs.seed, digest)
    elif proto == "qi":
        body = _estimate_qi(cfg, fs, out, plots, fs.seed, digest)
    else:
        raise DomainError("estimate does not apply to calibration configs; "
                          "use the calibrate subcommand")
    write_report(out / "report.json", "estimate", fs.seed, digest, body)
    print(f"wrote {out / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def _predict_statistics(cfg) -> tuple[list[str], list[tuple]]:
    src = source_from_config(cfg)
    eta1, eta2 = _etas(cfg)
    jm = detected_moments(src, eta1, eta2)
    row = {
        "kind": src.kind, "mu": src.mu, "modes": src.modes,
        "eta1": eta1, "eta2": eta2,
        "nrf": population_value("NRF", jm),
        "fano1": jm.arm1.fano(), "fano2": jm.arm2.fano(),
        "cauchy_schwarz": population_value("CauchySchwarz", jm),
        "enhancement": 1.0 / src.mu + 1.0,
    }
    if optional(cfg, "geometry") is not None:
        layout = layout_from_config(cfg)
        a = collection_efficiency(layout, src.mu)
        row["collection"] = a
        row["nrf"] = predicted_nrf(eta1, a) if eta1 == eta2 else row["nrf"]
    return list(row), [tuple(row.values())]


def _predict_imaging(cfg) -> tuple[list[str], list[tuple]]:
    src = source_from_config(cfg)
    eta1, _ = _etas(cfg)
    alpha = float(require(cfg, "imaging.alpha", float))
    k = _frames_count(cfg)
    mean_n = eta1 * src.mu * src.modes
    f = 1.0 + eta1 * src.mu
    sigma = 1.0 - eta1
    cols = ["scheme", "alpha", "delta_alpha_per_frame", "delta_alpha_run",
            "snr_vs_direct"]
    rows = []
    for scheme in SCHEMES:
        da = predicted_alpha_uncertainty(scheme, alpha, f, sigma, mean_n)
        rows.append((scheme, alpha, da, da / math.sqrt(k),
                     snr_ratio(scheme, "direct", alpha, sigma)))
    return cols, rows


def _predict_qi(cfg) -> tuple[list[str], list[tuple]]:
    scenario = _qi_scenario(cfg)
    k = _frames_count(cfg)
    values = optional(cfg, "sweep.values", [10.0, 30.0, 100.0])
    mu = scenario.probe_photons / scenario.modes
    cols = ["background_photons", "epsilon", "boundary_background",
            "snr_predicted", "snr_enhancement"]
    rows = []
    for nb in values:
        s = scenario.replace(background_photons=float(nb))
        rows.append((float(nb), predicted_epsilon(s),
                     nonclassicality_boundary(s), predicted_qi_snr(s, k),
                     qi_enhancement(mu)))
    return cols, rows


def _predict_ghost(cfg) -> tuple[list[str], list[tuple]]:
    src = source_from_config(cfg)
    obj = _ghost_object(cfg)
    t1 = float(optional(cfg, "ghost.t1", 1.0))
    k = _frames_count(cfg)
    pred = predicted_gi_snr(obj, arm_mu(src), t1, k)
    r_high = int(obj.region_masks()[0].sum())
    row = (arm_mu(src), k, pred.thermal, pred.twin_beam,
           predicted_enhancement(arm_mu(src)), snr_large_mu_limit(k, r_high))
    return ["mu", "frames", "snr_thermal", "snr_twin_beam", "enhancement",
            "snr_large_mu_limit"], [row]


def _predict_calibration(cfg) -> tuple[list[str], list[tuple]]:
    method = str(require(cfg, "calibration.method", str))
    if method != "emccd":
        raise DomainError("predict supports calibration.method = 'emccd' only")
    model = _gain_model(cfg)
    base = float(require(cfg, "calibration.efficiency", float))
    thresholds = require(cfg, "calibration.thresholds", list)
    rows = [(float(t), predicted_threshold_efficiency(model, base, float(t)))
            for t in thresholds]
    return ["threshold", "efficiency"], rows


def cmd_predict(args) -> int:
    cfg, digest = _require_config(args)
    proto = _protocol(cfg)
    out = _outdir(args)
    builders = {
        "statistics": _predict_statistics,
        "imaging": _predict_imaging,
        "qi": _predict_qi,
        "ghost": _predict_ghost,
        "calibration": _predict_calibration,
    }
    cols, rows = builders[proto](cfg)
    path = out / "predicted.csv"
    write_table(path, cols, rows,
                _provenance(optional(cfg, "run.seed", 0), digest,
                            protocol=proto))
    for row in rows:
        print("  ".join(f"{c}={v:.6g}" if isinstance(v, float) else f"{c}={v}"
                        for c, v in zip(cols, row)))
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def _calibrate_klyshko(cfg, path, out, plots, digest) -> dict:
    rec = CoincidenceRecord.load_csv(path)
    est = klyshko_efficiency(rec)
    print(f"eta1 = {est.value:.5g} +/- {est.standard_error:.2g} [{est.status}]")
    return {"method": "klyshko", "efficiency": est.value,
            "standard_error": est.standard_error, "status": est.status,
            "meta": est.meta}


def _calibrate_pnr(cfg, path, out, plots, digest) -> dict:
    hist = PnrHistograms.load_csv(path)
    res = pnr_efficiencies(hist)
    rows = [(p.clicks, p.value, p.standard_error, p.status)
            for p in res.peaks]
    write_table(out / "pnr_peaks.csv",
                ("clicks", "efficiency", "standard_error", "status"), rows,
                _provenance(0, digest, herald_purity=hist.herald_purity))
    if plots:
        plots.save_histogram_pair(out / "pnr_histograms.png", hist.heralded,
                                  hist.unheralded, title="click histograms")
    print(f"combined gamma = {res.combined:.5g} +/- {res.combined_se:.2g} "
          f"(chi2/dof = {res.chi_square:.3g}/{res.dof}, p = {res.p_value:.3g})")
    return {"method": "pnr", "efficiency": res.combined,
            "standard_error": res.combined_se, "chi_square": res.chi_square,
            "dof": res.dof, "p_value": res.p_value,
            "peaks": [{"clicks": p.clicks, "value": p.value,
                       "standard_error": p.standard_error,
                       "status": p.status} for p in res.peaks]}


def _calibrate_analog(cfg, path, out, plots, digest) -> dict:
    fs = _load_frameset(path)
    layout = layout_from_config(cfg)
    mu = float(require(cfg, "source.mu", float))
    trim = int(optional(cfg, "calibration.trim", 1))
    f1, f2 = fs.pair()
    est = analog_calibration(f1, f2, layout, mu=mu, trim=trim)
    print(f"eta1 = {est.value:.5g} +/- {est.standard_error:.2g} [{est.status}]")
    return {"method": "analog", "efficiency": est.value,
            "standard_error": est.standard_error, "status": est.status,
            "meta": est.meta}


def _calibrate_emccd(cfg, path, out, plots, digest) -> dict:
    fs = _load_frameset(path)
    layout = layout_from_config(cfg)
    mu = float(require(cfg, "source.mu", float))
    model = _gain_model(cfg)
    thresholds = [float(t) for t in require(cfg, "calibration.thresholds", list)]
    trim = int(optional(cfg, "calibration.trim", 1))
    f1, f2 = fs.pair()
    cal = emccd_threshold_calibration(f1, f2, model, layout, thresholds,
                                      mu=mu, trim=trim)
    cal.save_csv(out / "eta_curve.csv",
                 _provenance(fs.seed, digest, method="emccd"))
    predicted = [predicted_threshold_efficiency(model, cal.base.value, t)
                 for t in cal.thresholds]
    if plots:
        plots.save_efficiency_curve(out / "eta_curve.png", cal.thresholds,
                                    cal.efficiency, cal.standard_error,
                                    predicted,
                                    title="threshold-efficiency curve")
    monotone = bool(cal.monotone(slack_se=3.0))
    print(f"base efficiency (analog path): {cal.base.value:.5g} "
          f"+/- {cal.base.standard_error:.2g}")
    for t, e, se, st in zip(cal.thresholds, cal.efficiency,
                            cal.standard_error, cal.status):
        tail = f"{e:.5g} +/- {se:.2g}" if math.isfinite(e) else "---"
        print(f"  T = {t:8.4g}: eta = {tail} [{st}]")
    print(f"monotone non-increasing: {monotone}")
    return {"method": "emccd", "base_efficiency": cal.base.value,
            "base_standard_error": cal.base.standard_error,
            "monotone": monotone,
            "curve": [{"threshold": t, "efficiency": e, "standard_error": se,
                       "status": st}
                      for t, e, se, st in zip(cal.thresholds, cal.efficiency,
                                              cal.standard_error, cal.status)]}


def cmd_calibrate(args) -> int:
    cfg, digest = _require_config(args)
    if _protocol(cfg) != "calibration":
        raise DomainError("calibrate needs a config with run.protocol = 'calibration'")
    method = str(require(cfg, "calibration.method", str))
    out = _outdir(args)
    plots = _plots(args)
    handlers = {
        "klyshko": _calibrate_klyshko,
        "pnr": _calibrate_pnr,
        "analog": _calibrate_analog,
        "emccd": _calibrate_emccd,
    }
    if method not in handlers:
        raise DomainError(
            f"calibration.method must be one of {sorted(handlers)}, got {method!r}")
    body = handlers[method](cfg, args.data, out, plots, digest)
    write_report(out / "efficiency.json", "calibrate",
                 optional(cfg, "run.seed", 0), digest, body)
    print(f"wrote {out / 'efficiency.json'}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _sweep_eta(cfg, seed, k, threads, values):
    src = source_from_config(cfg)
    cols = ["eta", "sigma", "sigma_se", "sigma_predicted", "deviation_sigma"]
    rows = []
    for j, eta in enumerate(values):
        eta = float(eta)
        parts = _chunk_map(k, threads, lambda i, n: simulate_pair_series(
            src, eta, eta, n, stream(seed, j, i)))
        x = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        rep = nrf(x, y, prediction=1.0 - eta)
        rows.append((eta, rep.value, rep.standard_error,
                     rep.analytic_prediction, rep.deviation_sigma()))
    curves = [("measured", [r[1] for r in rows], [r[2] for r in rows]),
              ("1 - eta", [r[3] for r in rows], None)]
    return cols, rows, ("detection efficiency", "noise reduction factor",
                        curves, False)


def _sweep_x(cfg, seed, k, threads, values):
    eta1, eta2 = _etas(cfg)
    if eta1 != eta2:
        raise DomainError("the X sweep prediction assumes eta1 == eta2")
    mu = float(require(cfg, "source.mu", float))
    geo = optional(cfg, "geometry", {}) or {}
    d = float(geo.get("d", 0.0))
    beta = float(geo.get("beta", 0.5))
    grid = _grid_from(cfg, "geometry.grid", [64, 64])
    cols = ["x", "collection", "sigma", "sigma_se", "sigma_predicted",
            "deviation_sigma"]
    rows = []
    for j, x in enumerate(values):
        layout = ModeLayout.from_dimensionless(float(x), d, beta)
        a = collection_efficiency(layout, mu)
        f1, f2 = _synthesize_pair(layout, mu, grid, k, seed, j, threads,
                                  eta1, eta2)
        rep = nrf_grid(f1, f2, prediction=predicted_nrf(eta1, a))
        rows.append((float(x), a, rep.value, rep.standard_error,
                     rep.analytic_prediction, rep.deviation_sigma()))
    curves = [("measured", [r[2] for r in rows], [r[3] for r in rows]),
              ("1 - eta A", [r[4] for r in rows], None)]
    return cols, rows, ("region size X", "noise reduction factor", curves,
                        False)


def _sweep_binning(cfg, seed, k, threads, values):
    eta1, eta2 = _etas(cfg)
    if eta1 != eta2:
        raise DomainError("the binning sweep prediction assumes eta1 == eta2")
    layout = layout_from_config(cfg)
    mu = float(require(cfg, "source.mu", float))
    grid = _grid_from(cfg, "geometry.grid", [64, 64])
    f1, f2 = _synthesize_pair(layout, mu, grid, k, seed, 0, threads,
                              eta1, eta2)
    entries = binning_sweep((f1, f2), [int(v) for v in values], eta1, layout,
                            mu)
    cols = list(entries[0])
    rows = [tuple(e[c] for c in cols) for e in entries]
    curves = [("measured", [e["sigma"] for e in entries],
               [e["sigma_se"] for e in entries]),
              ("1 - eta A", [e["sigma_predicted"] for e in entries], None)]
    return cols, rows, ("binning factor d", "noise reduction factor", curves,
                        False)


def _sweep_background(cfg, seed, k, threads, values):
    scenario = _qi_scenario(cfg)
    entries = epsilon_sweep(scenario, [float(v) for v in values], k,
                            stream(seed, 0))
    cols = list(entries[0])
    rows = [tuple(e[c] for c in cols) for e in entries]
    extra = {"boundary_background": nonclassicality_boundary(scenario)}
    try:
        extra["epsilon_crossing"] = epsilon_crossing(entries)
    except DataError:
        pass
    curves = [("measured", [e["epsilon"] for e in entries],
               [e["epsilon_se"] for e in entries]),
              ("predicted", [e["epsilon_predicted"] for e in entries], None)]
    return cols, rows, ("background photons", "Cauchy-Schwarz epsilon",
                        curves, True), extra


def cmd_sweep(args) -> int:
    cfg, digest = _require_config(args)
    seed = resolve_seed(cfg, args.seed)
    k = _frames_count(cfg)
    axis = str(require(cfg, "sweep.axis", str))
    values = require(cfg, "sweep.values", list)
    if not values:
        raise DomainError("sweep.values must be a non-empty list")
    out = _outdir(args)
    plots = _plots(args)
    handlers = {
        "eta": _sweep_eta,
        "x": _sweep_x,
        "binning": _sweep_binning,
        "background": _sweep_background,
    }
    if axis not in handlers:
        raise DomainError(
            f"sweep.axis must be one of {sorted(handlers)}, got {axis!r}")
    result = handlers[axis](cfg, seed, k, args.threads, values)
    extra = {}
    if len(result) == 4:
        cols, rows, fig, extra = result
    else:
        cols, rows, fig = result
    prov = _provenance(seed, digest, axis=axis, frames=k, **extra)
    path = out / "sweep.csv"
    write_table(path, cols, rows, prov)
    if plots:
        xlabel, ylabel, curves, logx = fig
        hline = 1.0 if axis == "background" else None
        plots.save_series(out / "sweep.png", [float(v) for v in values],
                          curves, xlabel, ylabel,
                          title=f"{axis} sweep", logx=logx, hline=hline)
    for row in rows:
        print("  ".join(f"{c}={v:.5g}" if isinstance(v, float) else f"{c}={v}"
                        for c, v in zip(cols, row)))
    for key, value in extra.items():
        print(f"{key} = {value:.5g}")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    from .acceptance import run_acceptance
    ids = None
    if args.criteria:
        try:
            ids = sorted({int(tok) for tok in args.criteria.split(",")})
        except ValueError:
            raise DomainError(
                f"--criteria must be a comma-separated list of integers, "
                f"got {args.criteria!r}") from None
    out = _outdir(args)
    results = run_acceptance(ids, threads=args.threads)
    body = {"results": [r.as_dict() for r in results]}
    write_report(out / "acceptance.json", "verify", 0, NO_CONFIG, body)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed; "
          f"report in {out / 'acceptance.json'}")
    return 4 if failed else 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, metavar="FILE",
                        help="TOML experiment configuration")
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (overrides [run].seed)")
    common.add_argument("--out", type=Path, default=Path("out"),
                        metavar="DIR", help="output directory (default: out)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for frame generation")
    common.add_argument("--format", choices=("native", "csv"),
                        default="native",
                        help="frame output format (simulate)")
    common.add_argument("--no-plot", action="store_true",
                        help="skip PNG figure rendering")

    parser = argparse.ArgumentParser(
        prog="twinbeam",
        description="Twin-beam photon statistics: simulation, estimation, "
                    "calibration.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common],
                       help="generate frames from a config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", parents=[common],
                       help="run estimators over recorded frames")
    p.add_argument("frames", type=Path, help="FrameSet file (.tbfs)")
    p.add_argument("--reference", type=Path, default=None,
                   help="no-object reference FrameSet (imaging)")
    p.add_argument("--no-check", action="store_true",
                   help="skip the config-hash match against the FrameSet")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("predict", parents=[common],
                       help="analytic predictions for a config")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("calibrate", parents=[common],
                       help="recover detector efficiency from recorded data")
    p.add_argument("data", type=Path,
                   help="coincidence CSV, histogram CSV, or FrameSet")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sweep", parents=[common],
                       help="measured vs predicted over a sweep axis")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", parents=[common],
                       help="run the acceptance suite")
    p.add_argument("--criteria", default=None,
                   help="comma-separated criterion numbers (default: all)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DomainError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except StatisticalCheckError as exc:
        print(f"statistical check failed: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
