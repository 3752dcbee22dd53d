"""RMSE scoring, grid search over (lambda_u, lambda_v), model comparison tables."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .data import DataError, ImageStore, RatingsDataset, SplitSpec, split_cold_items, split_dataset
from .factorization import Checkpoint, Hyperparams, ModelKind, NetworkConfig, train
from .network import DivergenceError, ImageRefs, predict_batched

_logger = logging.getLogger(__name__)


def rmse(pairs) -> float:
    """Root mean squared error of ``(predicted, actual)`` pairs.

    Accepts a sequence of pairs or an ``(n, 2)`` array.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("rmse of an empty list")
    arr = arr.reshape(-1, 2)
    diff = arr[:, 0] - arr[:, 1]
    return math.sqrt(float(diff @ diff) / len(diff))


@dataclass
class EvalReport:
    rmse: float
    rmse_warm: float
    rmse_cold: float
    n_pairs: int
    n_warm: int
    n_cold: int
    n_fallback: int
    residual_mean: float
    residual_max: float
    predictions: np.ndarray = field(repr=False, default=None)
    actual: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("predictions")
        d.pop("actual")
        return d


def _rmse_or_nan(pred, actual):
    return rmse(np.column_stack([pred, actual])) if len(pred) else float("nan")


def evaluate(ckpt: Checkpoint, test: RatingsDataset, images: ImageStore | None = None,
             user_bundle_images: dict[int, np.ndarray] | None = None) -> EvalReport:
    """Score ``ckpt`` on ``test`` (same index space as training).

    Pairs touching a user or item without training ratings are "cold".  A
    cold item is predicted through the item tower when the model has one and
    ``images`` holds the item; a cold user needs an entry in
    ``user_bundle_images``.  Anything else falls back to the training mean.
    """
    if not len(test):
        raise DataError("test set is empty")
    if test.num_users != ckpt.num_users or test.num_items != ckpt.num_items:
        raise DataError("test set does not share the checkpoint's index space")
    users, items = test.users, test.items
    cold_u = np.isin(users, list(ckpt.cold_users))
    cold_i = np.isin(items, list(ckpt.cold_items))

    U_eff = ckpt.U.copy()
    V_eff = ckpt.V.copy()
    ok_u = ~np.isin(np.arange(ckpt.num_users), list(ckpt.cold_users))
    ok_i = ~np.isin(np.arange(ckpt.num_items), list(ckpt.cold_items))

    need_items = np.unique(items[cold_i])
    if len(need_items) and ckpt.item_tower is not None and images is not None:
        have = np.array([test.item_ids[j] in images for j in need_items], dtype=bool)
        need_items = need_items[have]
        if len(need_items):
            pix = np.stack([images.get(test.item_ids[j]) for j in need_items])
            V_eff[need_items] = predict_batched(
                ckpt.item_tower, ImageRefs(pix, np.arange(len(pix))[:, None]))
            ok_i[need_items] = True
    if user_bundle_images and ckpt.user_tower is not None:
        for i in np.unique(users[cold_u]):
            if int(i) in user_bundle_images:
                x = np.asarray(user_bundle_images[int(i)], dtype=np.float64)
                U_eff[i] = ckpt.user_tower.forward(x[None])[0]
                ok_u[i] = True

    pred = np.einsum("ij,ij->i", U_eff[users], V_eff[items])
    fallback = ~(ok_u[users] & ok_i[items])
    pred[fallback] = ckpt.train_mean
    actual = test.ratings
    resid = pred - actual
    warm = ~(cold_u | cold_i)
    return EvalReport(
        rmse=_rmse_or_nan(pred, actual),
        rmse_warm=_rmse_or_nan(pred[warm], actual[warm]),
        rmse_cold=_rmse_or_nan(pred[~warm], actual[~warm]),
        n_pairs=len(actual),
        n_warm=int(warm.sum()),
        n_cold=int((~warm).sum()),
        n_fallback=int(fallback.sum()),
        residual_mean=float(resid.mean()),
        residual_max=float(np.abs(resid).max()),
        predictions=pred,
        actual=np.array(actual),
    )


# -- grid search -------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    lambda_u: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    lambda_v: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)

    def __post_init__(self):
        object.__setattr__(self, "lambda_u", tuple(sorted(set(float(x) for x in self.lambda_u))))
        object.__setattr__(self, "lambda_v", tuple(sorted(set(float(x) for x in self.lambda_v))))
        if not self.lambda_u or not self.lambda_v:
            raise ValueError("grid candidate sets must be non-empty")
        if min(self.lambda_u + self.lambda_v) <= 0:
            raise ValueError("grid values must be positive")

    def cells(self) -> list[tuple[float, float]]:
        return [(lu, lv) for lu in self.lambda_u for lv in self.lambda_v]


@dataclass
class GridResult:
    best: tuple[float, float]
    table: dict[tuple[float, float], float]

    def to_rows(self) -> list[dict]:
        return [{"lambda_u": lu, "lambda_v": lv, "validation_rmse": r}
                for (lu, lv), r in sorted(self.table.items())]


def argmin_cell(table: dict[tuple[float, float], float]) -> tuple[float, float]:
    """Smallest value; ties go to the lexicographically smaller cell."""
    return min(sorted(table), key=lambda c: table[c])


def grid_search(kind, train_ds: RatingsDataset, validation: RatingsDataset,
                images: ImageStore | None, grid: GridSpec, hyper: Hyperparams,
                net: NetworkConfig = NetworkConfig()) -> GridResult:
    """Train one model per (lambda_u, lambda_v) cell, score on ``validation``."""
    if not len(validation):
        raise DataError("validation set is empty")
    table = {}
    for lu, lv in grid.cells():
        h = replace(hyper, lambda_u=lu, lambda_v=lv)
        try:
            ckpt, _ = train(kind, train_ds, images, h, net)
            score = evaluate(ckpt, validation, images).rmse
        except DivergenceError as exc:
            _logger.warning("cell (%g, %g) diverged: %s", lu, lv, exc)
            score = math.inf
        if not math.isfinite(score):
            score = math.inf
        table[(lu, lv)] = score
        _logger.info("grid %s lambda_u=%g lambda_v=%g rmse=%.5f", ModelKind(kind).value, lu, lv, score)
    return GridResult(argmin_cell(table), table)


# -- comparison --------------------------------------------------------------

CSV_COLUMNS = ("model", "train_fraction", "rmse_warm", "rmse_cold", "rmse_all", "imp_pct")


@dataclass
class ComparisonRow:
    model: str
    train_fraction: float
    rmse_warm: float
    rmse_cold: float
    rmse_all: float
    lambda_u: float
    lambda_v: float
    imp_pct: float | None = None


def improvement(baseline: float, ours: float) -> float:
    """Percentage by which ``ours`` improves on ``baseline`` (lower is better)."""
    return (baseline - ours) / baseline * 100.0


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]

    def fractions(self) -> list[float]:
        return sorted({r.train_fraction for r in self.rows})

    def fill_improvement(self) -> None:
        """Best bilateral row against the best other row, per training fraction.

        Without a BI_ISFMF row the last listed model plays "ours".
        """
        for f in self.fractions():
            rows = [r for r in self.rows if r.train_fraction == f]
            for r in rows:
                r.imp_pct = None
            ours_rows = [r for r in rows if r.model == ModelKind.BI_ISFMF.value]
            if ours_rows and len(ours_rows) < len(rows):
                others = [r for r in rows if r.model != ModelKind.BI_ISFMF.value]
            else:
                ours_rows, others = rows[-1:], rows[:-1]
            if not others:
                continue
            ours = min(ours_rows, key=lambda r: r.rmse_all)
            base = min(others, key=lambda r: r.rmse_all)
            ours.imp_pct = improvement(base.rmse_all, ours.rmse_all)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.model, repr(r.train_fraction), repr(r.rmse_warm), repr(r.rmse_cold),
                        repr(r.rmse_all), "" if r.imp_pct is None else repr(r.imp_pct)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([asdict(r) for r in self.rows], indent=2, sort_keys=True)

    def to_text(self) -> str:
        """Models down, training fractions across, one imp line at the bottom."""
        fracs = self.fractions()
        models = list(dict.fromkeys(r.model for r in self.rows))
        head = f"{'Model':<12}" + "".join(f"{round(f * 100):>10d}" for f in fracs)
        lines = [head]
        for m in models:
            cells = []
            for f in fracs:
                hit = [r for r in self.rows if r.model == m and r.train_fraction == f]
                cells.append(f"{hit[0].rmse_all:>10.4f}" if hit else f"{'-':>10}")
            lines.append(f"{m:<12}" + "".join(cells))
        imps = []
        for f in fracs:
            hit = [r.imp_pct for r in self.rows if r.train_fraction == f and r.imp_pct is not None]
            imps.append(f"{hit[0]:>9.2f}%" if hit else f"{'-':>10}")
        lines.append(f"{'imp':<12}" + "".join(imps))
        return "\n".join(lines)


def _three_way(data, train_fraction, validation_fraction, cold_item_fraction, seed):
    """Train/validation/test with an optional block of items held out to test."""
    rest, held, _ = split_cold_items(data, cold_item_fraction, seed)
    n = len(data)
    # fractions apply to the whole dataset; the held-out items count toward test
    f_train = min(1.0, train_fraction * n / max(len(rest), 1))
    f_val = min(1.0 - f_train, validation_fraction * n / max(len(rest), 1))
    spec = SplitSpec(f_train, f_val, max(0.0, 1.0 - f_train - f_val), seed)
    tr, va, te = split_dataset(rest, spec)
    if len(held):
        te = RatingsDataset(data.user_ids, data.item_ids,
                            np.concatenate([te.users, held.users]),
                            np.concatenate([te.items, held.items]),
                            np.concatenate([te.ratings, held.ratings]), data.scale)
    return tr, va, te


def compare_models(data: RatingsDataset, images: ImageStore | None, kinds: Sequence,
                   fractions: Iterable[float], hyper: Hyperparams,
                   net: NetworkConfig = NetworkConfig(), grid: GridSpec | None = None,
                   validation_fraction: float = 0.1, cold_item_fraction: float = 0.0,
                   seed: int = 0) -> ComparisonTable:
    """Re-split per training fraction, tune each model on validation, score on test.

    With ``grid=None`` the lambdas in ``hyper`` are used as given.
    """
    kinds = [ModelKind(k) for k in kinds]
    if len(kinds) < 2:
        raise ValueError("compare_models needs at least two model kinds")
    rows = []
    for f in fractions:
        tr, va, te = _three_way(data, f, validation_fraction, cold_item_fraction, seed)
        for kind in kinds:
            h = hyper
            if grid is not None:
                res = grid_search(kind, tr, va, images, grid, hyper, net)
                h = replace(hyper, lambda_u=res.best[0], lambda_v=res.best[1])
            ckpt, _ = train(kind, tr, images, h, net)
            rep = evaluate(ckpt, te, images)
            rows.append(ComparisonRow(kind.value, float(f), rep.rmse_warm, rep.rmse_cold,
                                      rep.rmse, h.lambda_u, h.lambda_v))
            _logger.info("%s @ %.2f: test rmse %.5f", kind.value, f, rep.rmse)
    table = ComparisonTable(rows)
    table.fill_improvement()
    return table


@dataclass
class SweepRow:
    P: int
    mean: float
    variance: float
    rmses: list[float]


def image_count_sweep(data: RatingsDataset, images: ImageStore, P_values: Sequence[int],
                      repeats: int, hyper: Hyperparams, net: NetworkConfig = NetworkConfig(),
                      train_fraction: float = 0.8, validation_fraction: float = 0.1,
                      cold_item_fraction: float = 0.0,
                      kind=ModelKind.BI_ISFMF) -> list[SweepRow]:
    """Test RMSE of ``kind`` for each bundle length P over seeded repeats.

    Repeat ``r`` uses split seed and training seed ``hyper.seed + r`` for every
    P, so the P values are compared on identical splits.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out = []
    for P in P_values:
        scores = []
        for r in range(repeats):
            s = hyper.seed + r
            tr, _, te = _three_way(data, train_fraction, validation_fraction,
                                   cold_item_fraction, s)
            ckpt, _ = train(kind, tr, images, replace(hyper, seed=s),
                            replace(net, bundle_size=int(P)))
            scores.append(evaluate(ckpt, te, images).rmse)
        arr = np.array(scores)
        out.append(SweepRow(int(P), float(arr.mean()), float(arr.var()), scores))
    return out


def format_sweep(rows: list[SweepRow]) -> str:
    lines = [f"{'P':>3}{'mean':>12}{'variance':>14}"]
    lines += [f"{r.P:>3}{r.mean:>12.5f}{r.variance:>14.3e}" for r in rows]
    return "\n".join(lines)
