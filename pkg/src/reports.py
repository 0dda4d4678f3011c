"""
Output writers: CSV tables with a provenance header, YAML summaries,
plain-text certification reports and plot-ready data.

Every file starts with (or contains) the config hash and root seed so a
result can be traced back to the run that produced it.
"""
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd
import yaml

from .certify import StabilityReport
from .engine import ComparisonReport, Trajectory
from .scenario import LoadScenario

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.12g'


def provenance(config_hash: str, seed: int) -> Dict[str, object]:
    return {'config_hash': config_hash, 'seed': int(seed)}


def write_csv(path, frame: pd.DataFrame, meta: Dict[str, object]) -> Path:
    """Write frame as CSV below '# key=value' header lines"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        for key, value in meta.items():
            f.write(f"# {key}={value}\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT)
    logger.debug(f"wrote {path} ({len(frame)} rows)")
    return path


def read_csv(path) -> pd.DataFrame:
    """Read a CSV written by write_csv (header comments skipped)"""
    return pd.read_csv(path, comment='#', float_precision='round_trip')


def read_meta(path) -> Dict[str, str]:
    meta = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if not line.startswith('# '):
                break
            key, _, value = line[2:].rstrip('\n').partition('=')
            meta[key] = value
    return meta


def _plain(value):
    """numpy scalars and arrays to YAML-safe builtins"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_summary(path, summary: dict, meta: Dict[str, object]) -> Path:
    """Key/value YAML document; provenance keys come first"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dict(meta)
    data.update(_plain(summary))
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(data, f, sort_keys=False)
    return path


def format_certify_report(report: StabilityReport, meta: Dict[str, object]) -> str:
    lines = [
        '=' * 60,
        f"Stability certificate ({report.mode})",
        '=' * 60,
    ]
    lines.extend(f"{key}: {value}" for key, value in meta.items())
    lines.append(f"epsilon: {report.epsilon:.6g}")
    lines.append(f"alpha: {report.alpha:.6g}")
    lines.append(f"basis samples: {report.sample_count}")
    lines.append('')
    lines.append('Conditions:')
    for name, result in report.conditions.items():
        mark = 'PASS' if result.passed else 'FAIL'
        detail = f"  ({result.detail})" if result.detail else ''
        lines.append(f"  [{mark}] {name}: margin {result.margin:.6g}{detail}")
    lines.append('')
    lines.append(f"max spectral radius: {report.spectral_radius_max:.6g}")
    lines.append(f"contraction bound: {report.contraction_bound:.6g}")
    lines.append(f"max operator norm: {report.operator_norm_max:.6g}")
    if report.implication_holds is not None:
        lines.append(f"decentralized => centralized: {'holds' if report.implication_holds else 'VIOLATED'}")
    if report.warnings:
        lines.append('')
        lines.append('Warnings:')
        lines.extend(f"  - {warning}" for warning in report.warnings)
    lines.append('')
    lines.append(f"Result: {'CERTIFIED' if report.passed else 'NOT CERTIFIED'}")
    return '\n'.join(lines) + '\n'


def write_certify_report(out_dir, report: StabilityReport, meta: Dict[str, object]) -> Dict[str, Path]:
    """certify_report.txt, certify_report.yaml and spectral_radius.csv"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text_path = out_dir / 'certify_report.txt'
    text_path.write_text(format_certify_report(report, meta), encoding='utf-8')
    radii = pd.DataFrame({'sample': np.arange(len(report.spectral_radii)),
                          'spectral_radius': report.spectral_radii})
    return {
        'text': text_path,
        'summary': write_summary(out_dir / 'certify_report.yaml', report.to_dict(), meta),
        'spectral_radius': write_csv(out_dir / 'spectral_radius.csv', radii, meta),
    }


def _wide(values: np.ndarray, prefix: str, start: int = 0) -> pd.DataFrame:
    """(T, n) array to columns t, <prefix>_1..<prefix>_n"""
    values = np.asarray(values)
    frame = pd.DataFrame(values, columns=[f"{prefix}_{i + 1}" for i in range(values.shape[1])])
    frame.insert(0, 't', np.arange(start, start + len(values)))
    return frame


def netload_frame(scenario: LoadScenario) -> pd.DataFrame:
    """Measured net-load increment p(t+1) - p(t) beside the basis prediction c_i^T phi_i(t)"""
    increments = scenario.increments()
    prediction = scenario.prediction()
    T, n = increments.shape
    return pd.DataFrame({
        't': np.repeat(np.arange(T), n),
        'bus': np.tile(np.arange(1, n + 1), T),
        'measured': increments.ravel(),
        'predicted': prediction.ravel(),
    }, columns=['t', 'bus', 'measured', 'predicted'])


def write_plot_data(out_dir, trajectories: Dict[str, Trajectory], scenario: LoadScenario,
                    meta: Dict[str, object]) -> Dict[str, Path]:
    """
    plot_voltage.csv / plot_reactive.csv: one column per controller and bus,
    rows t = 0..T (voltage deviation and reactive power vs time).
    plot_netload.csv: measured vs predicted net-load increments.
    """
    out_dir = Path(out_dir)
    voltage, reactive = None, None
    for name, traj in trajectories.items():
        v = _wide(traj.v_tilde, f"{name}_v")
        q = _wide(traj.q, f"{name}_q")
        voltage = v if voltage is None else voltage.merge(v, on='t')
        reactive = q if reactive is None else reactive.merge(q, on='t')
    return {
        'voltage': write_csv(out_dir / 'plot_voltage.csv', voltage, meta),
        'reactive': write_csv(out_dir / 'plot_reactive.csv', reactive, meta),
        'netload': write_csv(out_dir / 'plot_netload.csv', netload_frame(scenario), meta),
    }


def trajectory_summary(traj: Trajectory, total_cost: float) -> dict:
    return {
        'controller': traj.controller,
        'horizon': traj.horizon,
        'buses': traj.n,
        'total_cost': float(total_cost),
        'clamp': traj.clamp,
        'saturation_count': traj.saturation_count,
        'max_abs_voltage_deviation': float(np.max(np.abs(traj.v_tilde[1:]))) if traj.horizon else 0.0,
        'initial_q': traj.q[0],
        'initial_v_tilde': traj.v_tilde[0],
    }


def write_trajectory(out_dir, traj: Trajectory, total_cost: float, meta: Dict[str, object],
                     stem: str = 'trajectory', extra: Optional[dict] = None) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    summary = trajectory_summary(traj, total_cost)
    summary.update(extra or {})
    return {
        'trajectory': write_csv(out_dir / f"{stem}.csv", traj.to_frame(), meta),
        'summary': write_summary(out_dir / f"{stem}_summary.yaml", summary, meta),
    }


def write_comparison(out_dir, report: ComparisonReport, meta: Dict[str, object]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    summary = {
        'ratios': report.summary.to_dict(orient='records'),
        'notes': list(report.notes),
    }
    return {
        'summary_csv': write_csv(out_dir / 'comparison_summary.csv', report.summary, meta),
        'per_scenario': write_csv(out_dir / 'comparison_scenarios.csv', report.per_scenario, meta),
        'summary': write_summary(out_dir / 'comparison.yaml', summary, meta),
    }


def write_train_log(path, frame: pd.DataFrame, meta: Dict[str, object]) -> Path:
    return write_csv(path, frame, meta)
