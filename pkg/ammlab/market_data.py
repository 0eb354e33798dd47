"""Price-bar ingestion, return-parameter estimation and OLS with p-values.

Kline files follow the Binance layout by default (open time in column 0,
close in column 4, no header). Per-bar statistics are used directly as
per-period model parameters.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats

from ammlab.errors import DataError
from ammlab.market_model import exchange_rate_volatility

logger = logging.getLogger(__name__)

MIN_COMMON_BARS = 30

# Fee regression across 110 pools: fee on (rho, sigmaB, sigma); documentation only
REFERENCE_FEE_REGRESSION = {
    "names": ["intercept", "rho", "sigmaB", "sigma"],
    "coefficients": [0.3454, -0.0040, -3.2821, 14.5096],
    "p_values": [0.1602, 0.9873, 0.5054, 0.0420],
    "n_pools": 110,
}

PathLike = Union[str, Path]


def _fail(error_msg: str, rows: Optional[Sequence[int]] = None):
    logger.error(error_msg)
    raise DataError(error_msg, rows=rows)


class KlineSchema(BaseModel):
    model_config = ConfigDict(frozen=True)

    has_header: bool = False
    time_column: int = Field(0, ge=0)
    close_column: int = Field(4, ge=0)
    delimiter: str = ","


@dataclass(frozen=True)
class PriceSeries:
    """Close prices keyed by strictly increasing epoch-millisecond timestamps."""

    timestamps: np.ndarray
    closes: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.timestamps.shape != self.closes.shape:
            _fail(f"Series {self.name!r}: {self.timestamps.size} timestamps but {self.closes.size} closes")
        bad = np.flatnonzero(~np.isfinite(self.closes) | (self.closes <= 0.0))
        if bad.size:
            _fail(f"Series {self.name!r}: non-positive or non-finite closes at rows {(bad + 1).tolist()}", (bad + 1).tolist())
        stalled = np.flatnonzero(np.diff(self.timestamps) <= 0)
        if stalled.size:
            rows = (stalled + 2).tolist()
            _fail(f"Series {self.name!r}: timestamps not strictly increasing at rows {rows}", rows)

    def __len__(self) -> int:
        return self.closes.size

    def to_series(self) -> pd.Series:
        return pd.Series(self.closes, index=pd.Index(self.timestamps, name="time"), name=self.name or "close")


def load_klines(path: PathLike, schema: Optional[KlineSchema] = None) -> PriceSeries:
    """Read a delimited kline file into a validated PriceSeries.

    Args:
        path: File to read
        schema: Column layout; Binance klines by default

    Returns:
        PriceSeries named after the file stem

    Raises:
        DataError: Unreadable file, missing columns, or bad rows (listed by file line)
    """
    schema = schema or KlineSchema()
    path = Path(path)
    try:
        frame = pd.read_csv(path, header=0 if schema.has_header else None, sep=schema.delimiter, dtype=str,
                            keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        _fail(f"Kline file not found: {path}")
    except pd.errors.EmptyDataError:
        _fail(f"Kline file is empty: {path}")
    except pd.errors.ParserError as e:
        _fail(f"Cannot parse {path}: {e}")

    needed = max(schema.time_column, schema.close_column)
    if frame.shape[1] <= needed:
        _fail(f"{path} has {frame.shape[1]} columns; column {needed} was requested")
    if frame.empty:
        _fail(f"Kline file has no data rows: {path}")

    first_line = 2 if schema.has_header else 1
    times = pd.to_numeric(frame.iloc[:, schema.time_column], errors="coerce").to_numpy(dtype=float)
    closes = pd.to_numeric(frame.iloc[:, schema.close_column], errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(times) | ~np.isfinite(closes))
    if bad.size:
        rows = (bad + first_line).tolist()
        _fail(f"{path}: unparseable or non-finite values at rows {rows}", rows)
    negative = np.flatnonzero(closes <= 0.0)
    if negative.size:
        rows = (negative + first_line).tolist()
        _fail(f"{path}: non-positive close prices at rows {rows}", rows)
    stalled = np.flatnonzero(np.diff(times) <= 0)
    if stalled.size:
        rows = (stalled + 1 + first_line).tolist()
        _fail(f"{path}: timestamps not strictly increasing at rows {rows}", rows)

    logger.debug(f"Loaded {closes.size} bars from {path}")
    return PriceSeries(times.astype(np.int64), closes, path.stem)


def align(series_a: PriceSeries, series_b: PriceSeries) -> pd.DataFrame:
    """Inner join on timestamps; unmatched bars are dropped."""
    joined = pd.concat([series_a.to_series().rename("a"), series_b.to_series().rename("b")], axis=1, join="inner")
    dropped = len(series_a) + len(series_b) - 2 * len(joined)
    if dropped:
        logger.info(f"Alignment dropped {dropped} unmatched bars")
    return joined.sort_index()


@dataclass(frozen=True)
class ReturnEstimate:
    mu_a: float
    mu_b: float
    sigma_a: float
    sigma_b: float
    rho: float
    sigma: float
    n_returns: int
    degenerate: bool = False

    @property
    def mean_standard_errors(self) -> Tuple[float, float]:
        root = np.sqrt(self.n_returns)
        return self.sigma_a / root, self.sigma_b / root

    @property
    def volatility_standard_errors(self) -> Tuple[float, float]:
        """Large-sample standard errors of the volatilities under normal returns."""
        root = np.sqrt(2.0 * self.n_returns)
        return self.sigma_a / root, self.sigma_b / root

    @property
    def correlation_standard_error(self) -> float:
        return (1.0 - self.rho ** 2) / np.sqrt(self.n_returns)

    def to_config_fragment(self) -> dict:
        """Market keys ready to paste into a run config."""
        return {"muA": self.mu_a, "muB": self.mu_b, "sigmaA": self.sigma_a, "sigmaB": self.sigma_b, "rho": self.rho}

    def to_dict(self) -> dict:
        return {**self.to_config_fragment(), "sigma": self.sigma, "n_returns": self.n_returns,
                "degenerate": self.degenerate}


def estimate_params(series_a: PriceSeries, series_b: PriceSeries) -> ReturnEstimate:
    """Per-bar log-return moments of two price series.

    Raises:
        DataError: Fewer than MIN_COMMON_BARS common timestamps
    """
    joined = align(series_a, series_b)
    if len(joined) < MIN_COMMON_BARS:
        _fail(f"Need at least {MIN_COMMON_BARS} common bars, found {len(joined)}")
    log_returns = np.log(joined / joined.shift(1)).dropna()
    ra = log_returns["a"].to_numpy()
    rb = log_returns["b"].to_numpy()
    sigma_a = float(np.std(ra, ddof=1))
    sigma_b = float(np.std(rb, ddof=1))
    degenerate = sigma_a == 0.0 or sigma_b == 0.0
    if degenerate:
        logger.warning("A price series has zero return variance; correlation reported as 0")
        rho = 0.0
    else:
        rho = float(np.clip(np.corrcoef(ra, rb)[0, 1], -1.0, 1.0))
    estimate = ReturnEstimate(
        mu_a=float(np.mean(ra)),
        mu_b=float(np.mean(rb)),
        sigma_a=sigma_a,
        sigma_b=sigma_b,
        rho=rho,
        sigma=exchange_rate_volatility(sigma_a, sigma_b, rho),
        n_returns=ra.size,
        degenerate=degenerate,
    )
    logger.info(f"Estimated from {ra.size} returns: sigmaA={sigma_a:.6f}, sigmaB={sigma_b:.6f}, rho={rho:.4f}")
    return estimate


@dataclass(frozen=True)
class RegressionResult:
    names: List[str]
    coefficients: np.ndarray
    std_errors: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    r_squared: float
    n_obs: int

    @property
    def dof(self) -> int:
        return self.n_obs - len(self.names)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "coefficients": self.coefficients.tolist(),
                "std_errors": self.std_errors.tolist(), "t_stats": self.t_stats.tolist(),
                "p_values": self.p_values.tolist(), "r_squared": self.r_squared, "n_obs": self.n_obs,
                "dof": self.dof}


def _collinear_column(design: np.ndarray, names: Sequence[str]) -> Optional[str]:
    for j in range(1, design.shape[1] + 1):
        if np.linalg.matrix_rank(design[:, :j]) < j:
            return names[j - 1]
    return None


def ols(y, X, names: Optional[Sequence[str]] = None) -> RegressionResult:
    """Least squares with an intercept, classical standard errors and two-sided t-test p-values.

    Args:
        y: Responses, shape [n]
        X: Regressors, shape [n, k] (or [n] for one regressor)
        names: Regressor names; x1..xk when omitted

    Raises:
        DataError: Too few observations or a rank-deficient design
    """
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if y.size != n:
        _fail(f"Response has {y.size} rows, regressors have {n}")
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(k)]
    if len(names) != k:
        _fail(f"{len(names)} names given for {k} regressors")
    if n <= k + 1:
        _fail(f"Need more than {k + 1} observations for {k} regressors, got {n}")
    all_names = ["intercept"] + names
    design = np.hstack([np.ones((n, 1)), X])
    culprit = _collinear_column(design, all_names)
    if culprit is not None:
        _fail(f"Design matrix is rank deficient: column {culprit!r} is collinear with earlier columns")

    xpx = design.T @ design
    beta = np.linalg.solve(xpx, design.T @ y)
    resid = y - design @ beta
    dof = n - k - 1
    s2 = float(resid @ resid) / dof
    se = np.sqrt(np.clip(np.diag(s2 * np.linalg.inv(xpx)), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stats = np.where(se > 0.0, beta / se, np.copysign(np.inf, beta))
    p_values = np.clip(2.0 * stats.t.sf(np.abs(t_stats), dof), 0.0, 1.0)
    centered = y - y.mean()
    tss = float(centered @ centered)
    r_squared = 1.0 - float(resid @ resid) / tss if tss > 0.0 else float("nan")
    return RegressionResult(all_names, beta, se, t_stats, p_values, r_squared, n)


def load_table(path: PathLike, response: str, regressors: Sequence[str], delimiter: str = ",") -> Tuple[np.ndarray, np.ndarray]:
    """Response vector and regressor matrix from a delimited table with a header row."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, sep=delimiter)
    except FileNotFoundError:
        _fail(f"Table not found: {path}")
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        _fail(f"Cannot parse {path}: {e}")
    wanted = [response, *regressors]
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        _fail(f"{path} lacks columns {missing}; available: {list(frame.columns)}")
    values = frame[wanted].apply(pd.to_numeric, errors="coerce")
    bad = np.flatnonzero(~np.isfinite(values.to_numpy(dtype=float)).all(axis=1))
    if bad.size:
        rows = (bad + 2).tolist()
        _fail(f"{path}: non-numeric values at rows {rows}", rows)
    return values[response].to_numpy(dtype=float), values[list(regressors)].to_numpy(dtype=float)
