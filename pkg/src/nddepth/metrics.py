"""Standard monocular depth evaluation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "log10", "delta1", "delta2", "delta3",
           "silog_eval", "irmse", "n_valid")


@dataclass(frozen=True)
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    silog_eval: float
    irmse: float
    n_valid: int

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_text(self) -> str:
        return "\n".join(f"{k}={_fmt(v)}" for k, v in self.as_dict().items()) + "\n"

    @staticmethod
    def csv_header() -> str:
        return ",".join(COLUMNS)

    def to_csv_row(self) -> str:
        return ",".join(_fmt(getattr(self, k)) for k in COLUMNS)


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def cap_mask(gt: np.ndarray, cap: tuple[float, float] = (0.0, np.inf)) -> np.ndarray:
    """Pixels with finite, positive ground truth in (cap_min, cap_max]."""
    lo, hi = cap
    gt = np.asarray(gt, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.isfinite(gt) & (gt > 0) & (gt > lo) & (gt <= hi)


def evaluate(pred: np.ndarray, gt: np.ndarray, cap: tuple[float, float] = (0.0, np.inf),
             benchmark_style: bool = False) -> MetricReport:
    """Evaluate ``pred`` against ``gt`` over the capped valid pixels.

    With ``benchmark_style`` the squared relative error is reported as
    100 * mean(((p - g) / g)^2), the online-benchmark convention.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if not cap[0] < cap[1]:
        raise ValueError("cap minimum must be below cap maximum")
    m = cap_mask(gt, cap)
    n = int(m.sum())
    if n == 0:
        raise ValueError("no valid ground-truth pixels inside the cap range")
    p, g = pred[m], gt[m]
    if not np.all(np.isfinite(p) & (p > 0)):
        raise ValueError("prediction must be positive and finite on evaluated pixels")

    err = p - g
    log_err = np.log(p) - np.log(g)
    ratio = np.maximum(p / g, g / p)
    if benchmark_style:
        sq_rel = 100.0 * np.mean((err / g) ** 2)
    else:
        sq_rel = np.mean(err ** 2 / g)
    silog_var = max(np.mean(log_err ** 2) - np.mean(log_err) ** 2, 0.0)
    return MetricReport(
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(sq_rel),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        rmse_log=float(np.sqrt(np.mean(log_err ** 2))),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        silog_eval=float(100.0 * np.sqrt(silog_var)),
        # 1/m -> 1/km
        irmse=float(np.sqrt(np.mean((1000.0 / p - 1000.0 / g) ** 2))),
        n_valid=n,
    )
