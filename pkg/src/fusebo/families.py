"""Surrogate family implementations and their hyperparameter search spaces.

Each family knows how to sample a configuration within the stage-0 complexity
caps, score configurations by k-fold R2 (with shared-path shortcuts where the
math allows), and fit a set of bootstrap members that can be queried together.

All families standardize inputs and, where the learner is not naturally
scale-equivariant, the target as well; predictions are always returned in the
original target units. This makes the whole ensemble exactly equivariant
under positive rescaling of a target.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.ensemble import GradientBoostingRegressor, RandomForestRegressor
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import enet_path
from sklearn.neighbors import NearestNeighbors

from .capacity import CapacityBudget

log = logging.getLogger(__name__)

FAMILY_IDS = (
    "linear-L2",
    "linear-L1",
    "linear-elastic",
    "k-nearest-neighbors",
    "random-forest",
    "gradient-boosted-trees",
    "feed-forward-net",
)

CAPACITY_CLASS = {
    "linear-L2": "low",
    "linear-L1": "low",
    "linear-elastic": "low",
    "k-nearest-neighbors": "medium",
    "random-forest": "high",
    "gradient-boosted-trees": "high",
    "feed-forward-net": "high",
}


class FamilyFitError(RuntimeError):
    """Raised when a family cannot produce a usable model on the data."""


@dataclass
class Standardizer:
    mean_x: np.ndarray
    scale_x: np.ndarray
    mean_y: float
    scale_y: float

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray) -> "Standardizer":
        sx = X.std(axis=0)
        sy = float(y.std())
        return cls(
            mean_x=X.mean(axis=0),
            scale_x=np.where(sx > 0, sx, 1.0),
            mean_y=float(y.mean()),
            scale_y=sy if sy > 0 else 1.0,
        )

    def fwd_x(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean_x) / self.scale_x

    def fwd_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean_y) / self.scale_y

    def inv_y(self, z: np.ndarray) -> np.ndarray:
        return z * self.scale_y + self.mean_y


class MemberSet:
    """Fitted bootstrap members of one family; queried as a block."""

    def predict_all(self, Xq: np.ndarray) -> np.ndarray:
        """Predictions of every member, shape (B, m)."""
        raise NotImplementedError

    def predict_subset(self, Xq: np.ndarray, idx: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    @property
    def n_members(self) -> int:
        raise NotImplementedError


class _StackedLinearMembers(MemberSet):
    def __init__(self, coefs: np.ndarray, intercepts: np.ndarray, stds: list[Standardizer]):
        self.coefs = coefs  # (B, d) in standardized space
        self.intercepts = intercepts  # (B,)
        self.stds = stds

    @property
    def n_members(self) -> int:
        return self.coefs.shape[0]

    def predict_all(self, Xq: np.ndarray) -> np.ndarray:
        return self.predict_subset(Xq, range(self.n_members))

    def predict_subset(self, Xq: np.ndarray, idx: Sequence[int]) -> np.ndarray:
        out = np.empty((len(list(idx)), Xq.shape[0]))
        for row, b in enumerate(idx):
            std = self.stds[b]
            z = std.fwd_x(Xq) @ self.coefs[b] + self.intercepts[b]
            out[row] = std.inv_y(z)
        return out


class _KnnMembers(MemberSet):
    """Stacked bootstrap kNN; queries run as one batched distance computation."""

    def __init__(self, X_train: np.ndarray, y_train: np.ndarray,
                 stds: list[Standardizer], k: int, weighting: str):
        self.X_train = X_train  # (B, n, d), standardized per member
        self.y_train = y_train  # (B, n)
        self.stds = stds
        self.k = k
        self.weighting = weighting
        self._train_sq = np.sum(X_train**2, axis=2)  # (B, n)

    @property
    def n_members(self) -> int:
        return self.X_train.shape[0]

    def predict_all(self, Xq: np.ndarray) -> np.ndarray:
        return self.predict_subset(Xq, range(self.n_members))

    def predict_subset(self, Xq: np.ndarray, idx: Sequence[int]) -> np.ndarray:
        idx = list(idx)
        Xs = np.stack([self.stds[b].fwd_x(Xq) for b in idx])  # (B, m, d)
        cross = Xs @ self.X_train[idx].transpose(0, 2, 1)  # (B, m, n)
        d2 = np.sum(Xs**2, axis=2)[:, :, None] - 2.0 * cross + self._train_sq[idx][:, None, :]
        k = min(self.k, self.X_train.shape[1])
        nbr = np.argpartition(d2, k - 1, axis=2)[:, :, :k]
        vals = np.take_along_axis(self.y_train[idx][:, None, :], nbr, axis=2)
        if self.weighting == "uniform":
            return vals.mean(axis=2)
        dist = np.sqrt(np.maximum(np.take_along_axis(d2, nbr, axis=2), 0.0))
        w = 1.0 / np.maximum(dist, 1e-12)
        return np.sum(vals * w, axis=2) / np.sum(w, axis=2)


class _SklearnMembers(MemberSet):
    """Tree-ensemble members with a direct tree-traversal prediction path.

    Estimator.predict carries per-call dispatch overhead that dominates when
    the inner optimizer queries members hundreds of times per iteration;
    walking the fitted trees directly avoids it. Falls back to .predict for
    anything unexpected.
    """

    def __init__(self, models: list):
        self.models = models

    @property
    def n_members(self) -> int:
        return len(self.models)

    def predict_all(self, Xq: np.ndarray) -> np.ndarray:
        return self.predict_subset(Xq, range(self.n_members))

    def predict_subset(self, Xq: np.ndarray, idx: Sequence[int]) -> np.ndarray:
        X32 = np.ascontiguousarray(Xq, dtype=np.float32)
        return np.stack([self._fast_predict(self.models[b], X32, Xq) for b in idx])

    @staticmethod
    def _fast_predict(model, X32: np.ndarray, Xq: np.ndarray) -> np.ndarray:
        try:
            if isinstance(model, RandomForestRegressor):
                out = np.zeros(X32.shape[0])
                for est in model.estimators_:
                    out += est.tree_.predict(X32).ravel()
                return out / len(model.estimators_)
            if isinstance(model, GradientBoostingRegressor):
                out = np.full(X32.shape[0], float(np.ravel(model.init_.constant_)[0]))
                for stage in model.estimators_.ravel():
                    out += model.learning_rate * stage.tree_.predict(X32).ravel()
                return out
        except AttributeError:
            pass
        return model.predict(Xq)


class _NetMembers(MemberSet):
    def __init__(self, W1, b1, w2, b2, stds: list[Standardizer]):
        self.W1, self.b1, self.w2, self.b2 = W1, b1, w2, b2  # stacked over members
        self.stds = stds

    @property
    def n_members(self) -> int:
        return self.W1.shape[0]

    def predict_all(self, Xq: np.ndarray) -> np.ndarray:
        return self.predict_subset(Xq, range(self.n_members))

    def predict_subset(self, Xq: np.ndarray, idx: Sequence[int]) -> np.ndarray:
        idx = list(idx)
        Xs = np.stack([self.stds[b].fwd_x(Xq) for b in idx])  # (B, m, d)
        A = np.tanh(Xs @ self.W1[idx] + self.b1[idx][:, None, :])
        z = np.einsum("bmh,bh->bm", A, self.w2[idx]) + self.b2[idx][:, None]
        return np.stack([self.stds[b].inv_y(z[row]) for row, b in enumerate(idx)])


# ---------------------------------------------------------------------------
# family definitions


class Family:
    family_id: str = ""

    @property
    def capacity_class(self) -> str:
        return CAPACITY_CLASS[self.family_id]

    def sample_config(self, rng: np.random.Generator, budget: CapacityBudget) -> dict:
        raise NotImplementedError

    def cv_scores(self, X, y, configs: list[dict], fold_ids: np.ndarray, seed: int) -> np.ndarray:
        """Mean k-fold validation R2 for each configuration."""
        return _generic_cv(self, X, y, configs, fold_ids, seed)

    def fit_members(self, X, y, config: dict, boot_idx: list[np.ndarray], seeds: list[int]) -> MemberSet:
        raise NotImplementedError

    def _fit_single(self, X, y, config: dict, seed: int):
        """Fit one model for CV; returns an object with .predict."""
        member = self.fit_members(X, y, config, [np.arange(X.shape[0])], [seed])
        return _SingleView(member)


class _SingleView:
    def __init__(self, members: MemberSet):
        self.members = members

    def predict(self, Xq: np.ndarray) -> np.ndarray:
        return self.members.predict_all(Xq)[0]


def _quiet_enet_path(Xs, ys, alphas, l1_ratio):
    # desk-scale tolerance; unconverged duality gaps at tiny alphas are benign
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return enet_path(Xs, ys, alphas=alphas, l1_ratio=l1_ratio, max_iter=2000, tol=1e-3)


def _r2(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    if ss_tot <= 1e-300:
        return 0.0 if ss_res > 1e-300 else 1.0
    return 1.0 - ss_res / ss_tot


def _generic_cv(family: Family, X, y, configs, fold_ids, seed) -> np.ndarray:
    n_folds = int(fold_ids.max()) + 1
    scores = np.full(len(configs), -np.inf)
    cache: dict[tuple, float] = {}
    for i, config in enumerate(configs):
        key = tuple(sorted(config.items()))
        if key in cache:
            scores[i] = cache[key]
            continue
        fold_r2 = []
        try:
            for f in range(n_folds):
                train, val = fold_ids != f, fold_ids == f
                model = family._fit_single(X[train], y[train], config, seed + f)
                fold_r2.append(_r2(y[val], model.predict(X[val])))
            value = float(np.mean(fold_r2))
        except Exception as exc:  # noqa: BLE001 - any fit failure disqualifies the trial
            log.debug("%s: config %s failed CV: %s", family.family_id, config, exc)
            value = -np.inf
        if not np.isfinite(value):
            value = -np.inf
        cache[key] = value
        scores[i] = value
    return scores


class RidgeFamily(Family):
    family_id = "linear-L2"
    _alphas = np.logspace(-4, 2, 13)

    def sample_config(self, rng, budget):
        return {"alpha": float(rng.choice(self._alphas))}

    def cv_scores(self, X, y, configs, fold_ids, seed):
        n_folds = int(fold_ids.max()) + 1
        alphas = np.array([c["alpha"] for c in configs])
        preds_r2 = np.zeros((len(configs), n_folds))
        for f in range(n_folds):
            train, val = fold_ids != f, fold_ids == f
            std = Standardizer.fit(X[train], y[train])
            Xs, ys = std.fwd_x(X[train]), std.fwd_y(y[train])
            U, s, Vt = np.linalg.svd(Xs, full_matrices=False)
            Uty = U.T @ ys
            Xv = std.fwd_x(X[val])
            for i, alpha in enumerate(alphas):
                coef = Vt.T @ (s / (s**2 + alpha) * Uty)
                pred = std.inv_y(Xv @ coef)
                preds_r2[i, f] = _r2(y[val], pred)
        return preds_r2.mean(axis=1)

    def fit_members(self, X, y, config, boot_idx, seeds):
        alpha = config["alpha"]
        B = len(boot_idx)
        coefs = np.zeros((B, X.shape[1]))
        stds = []
        for b, idx in enumerate(boot_idx):
            std = Standardizer.fit(X[idx], y[idx])
            Xs, ys = std.fwd_x(X[idx]), std.fwd_y(y[idx])
            gram = Xs.T @ Xs + alpha * np.eye(X.shape[1])
            coefs[b] = np.linalg.solve(gram, Xs.T @ ys)
            stds.append(std)
        return _StackedLinearMembers(coefs, np.zeros(B), stds)


class _PathLinearFamily(Family):
    """Shared base for L1 and elastic-net linear models via path solvers."""

    _alphas = np.logspace(-4, 0, 9)

    def _l1_ratio(self, config: dict) -> float:
        raise NotImplementedError

    def cv_scores(self, X, y, configs, fold_ids, seed):
        n_folds = int(fold_ids.max()) + 1
        ratios = sorted({self._l1_ratio(c) for c in configs})
        scores = np.zeros((len(configs), n_folds))
        for f in range(n_folds):
            train, val = fold_ids != f, fold_ids == f
            std = Standardizer.fit(X[train], y[train])
            Xs, ys = std.fwd_x(X[train]), std.fwd_y(y[train])
            Xv = std.fwd_x(X[val])
            for ratio in ratios:
                wanted = [i for i, c in enumerate(configs) if self._l1_ratio(c) == ratio]
                alphas = np.array(sorted({configs[i]["alpha"] for i in wanted}, reverse=True))
                path_alphas, coefs, _ = _quiet_enet_path(Xs, ys, alphas=alphas, l1_ratio=ratio)
                for i in wanted:
                    col = int(np.argmin(np.abs(path_alphas - configs[i]["alpha"])))
                    pred = std.inv_y(Xv @ coefs[:, col])
                    scores[i, f] = _r2(y[val], pred)
        return scores.mean(axis=1)

    def fit_members(self, X, y, config, boot_idx, seeds):
        alpha, ratio = config["alpha"], self._l1_ratio(config)
        B = len(boot_idx)
        out = np.zeros((B, X.shape[1]))
        stds = []
        for b, idx in enumerate(boot_idx):
            std = Standardizer.fit(X[idx], y[idx])
            Xs, ys = std.fwd_x(X[idx]), std.fwd_y(y[idx])
            _, coefs, _ = _quiet_enet_path(Xs, ys, alphas=np.array([alpha]), l1_ratio=ratio)
            out[b] = coefs[:, 0]
            stds.append(std)
        return _StackedLinearMembers(out, np.zeros(B), stds)


class LassoFamily(_PathLinearFamily):
    family_id = "linear-L1"

    def _l1_ratio(self, config):
        return 1.0

    def sample_config(self, rng, budget):
        return {"alpha": float(rng.choice(self._alphas))}


class ElasticFamily(_PathLinearFamily):
    family_id = "linear-elastic"
    _ratios = (0.2, 0.5, 0.8)

    def _l1_ratio(self, config):
        return config["l1_ratio"]

    def sample_config(self, rng, budget):
        return {
            "alpha": float(rng.choice(self._alphas)),
            "l1_ratio": float(rng.choice(self._ratios)),
        }


class KnnFamily(Family):
    family_id = "k-nearest-neighbors"

    def sample_config(self, rng, budget):
        return {
            "k": int(rng.integers(1, budget.caps.max_neighbors + 1)),
            "weighting": str(rng.choice(["uniform", "distance"])),
        }

    def cv_scores(self, X, y, configs, fold_ids, seed):
        n_folds = int(fold_ids.max()) + 1
        max_k = max(c["k"] for c in configs)
        scores = np.zeros((len(configs), n_folds))
        for f in range(n_folds):
            train, val = fold_ids != f, fold_ids == f
            n_train = int(train.sum())
            k_cap = min(max_k, n_train)
            std = Standardizer.fit(X[train], y[train])
            nn = NearestNeighbors(n_neighbors=k_cap).fit(std.fwd_x(X[train]))
            dist, nbr = nn.kneighbors(std.fwd_x(X[val]))
            vals = y[train][nbr]
            cum_mean = np.cumsum(vals, axis=1) / np.arange(1, k_cap + 1)
            w = 1.0 / np.maximum(dist, 1e-12)
            cum_wsum = np.cumsum(vals * w, axis=1)
            cum_w = np.cumsum(w, axis=1)
            for i, config in enumerate(configs):
                k = min(config["k"], k_cap)
                if config["weighting"] == "uniform":
                    pred = cum_mean[:, k - 1]
                else:
                    pred = cum_wsum[:, k - 1] / cum_w[:, k - 1]
                scores[i, f] = _r2(y[val], pred)
        return scores.mean(axis=1)

    def fit_members(self, X, y, config, boot_idx, seeds):
        stds = [Standardizer.fit(X[idx], y[idx]) for idx in boot_idx]
        X_train = np.stack([stds[b].fwd_x(X[idx]) for b, idx in enumerate(boot_idx)])
        y_train = np.stack([y[idx] for idx in boot_idx])
        return _KnnMembers(X_train, y_train, stds, config["k"], config["weighting"])


class RandomForestFamily(Family):
    family_id = "random-forest"

    def sample_config(self, rng, budget):
        depths = [d for d in (3, 5, 8) if d <= budget.caps.max_depth] or [budget.caps.max_depth]
        return {
            "n_estimators": int(rng.choice([12, 24])),
            "max_depth": int(rng.choice(depths)),
            "max_features": float(rng.choice([0.5, 1.0])),
            "min_samples_leaf": int(rng.choice([1, 4])),
        }

    def fit_members(self, X, y, config, boot_idx, seeds):
        models = []
        for idx, seed in zip(boot_idx, seeds):
            model = RandomForestRegressor(
                n_estimators=config["n_estimators"],
                max_depth=config["max_depth"],
                max_features=config["max_features"],
                min_samples_leaf=config["min_samples_leaf"],
                random_state=seed,
                n_jobs=1,
            )
            model.fit(X[idx], y[idx])
            models.append(model)
        return _SklearnMembers(models)


class BoostedTreesFamily(Family):
    family_id = "gradient-boosted-trees"

    def sample_config(self, rng, budget):
        rounds = [r for r in (24, 48) if r <= budget.caps.max_rounds] or [budget.caps.max_rounds]
        depths = [d for d in (2, 3) if d <= budget.caps.max_depth] or [budget.caps.max_depth]
        return {
            "n_estimators": int(rng.choice(rounds)),
            "learning_rate": float(rng.choice([0.05, 0.1])),
            "max_depth": int(rng.choice(depths)),
            "subsample": 1.0,
        }

    def fit_members(self, X, y, config, boot_idx, seeds):
        models = []
        for idx, seed in zip(boot_idx, seeds):
            model = GradientBoostingRegressor(
                n_estimators=config["n_estimators"],
                learning_rate=config["learning_rate"],
                max_depth=config["max_depth"],
                subsample=config["subsample"],
                max_features=0.7,
                random_state=seed,
            )
            model.fit(X[idx], y[idx])
            models.append(model)
        return _SklearnMembers(models)


class FeedForwardNetFamily(Family):
    """One hidden tanh layer trained by full-batch gradient descent.

    Members are fitted as a single stacked tensor computation, so a 16-member
    set costs roughly one batched matmul sequence per epoch instead of 16
    separate training loops.
    """

    family_id = "feed-forward-net"
    _momentum = 0.9

    def sample_config(self, rng, budget):
        hiddens = [h for h in (16, 32) if h <= budget.caps.max_hidden] or [budget.caps.max_hidden]
        return {
            "hidden": int(rng.choice(hiddens)),
            "lr": float(rng.choice([0.03, 0.1])),
            "l2": 1e-4,
            "epochs": int(np.clip(2 * budget.n_budget, 40, 120)),
        }

    def fit_members(self, X, y, config, boot_idx, seeds):
        B = len(boot_idx)
        stds = [Standardizer.fit(X[idx], y[idx]) for idx in boot_idx]
        Xs = np.stack([stds[b].fwd_x(X[idx]) for b, idx in enumerate(boot_idx)])
        ys = np.stack([stds[b].fwd_y(y[idx]) for b, idx in enumerate(boot_idx)])
        H, lr, l2, epochs = config["hidden"], config["lr"], config["l2"], config["epochs"]
        d = X.shape[1]
        n = Xs.shape[1]

        W1 = np.stack([np.random.default_rng(s).normal(0, 1.0 / np.sqrt(d), (d, H)) for s in seeds])
        w2 = np.stack([np.random.default_rng(s + 1).normal(0, 1.0 / np.sqrt(H), H) for s in seeds])
        b1 = np.zeros((B, H))
        b2 = np.zeros(B)
        vW1, vb1, vw2, vb2 = (np.zeros_like(W1), np.zeros_like(b1), np.zeros_like(w2), np.zeros_like(b2))

        for _ in range(epochs):
            A = np.tanh(Xs @ W1 + b1[:, None, :])  # (B, n, H)
            pred = np.einsum("bnh,bh->bn", A, w2) + b2[:, None]
            err = (pred - ys) / n  # (B, n)
            gw2 = np.einsum("bnh,bn->bh", A, err) + l2 * w2
            gb2 = err.sum(axis=1)
            dZ = err[:, :, None] * w2[:, None, :] * (1.0 - A**2)  # (B, n, H)
            gW1 = np.matmul(Xs.transpose(0, 2, 1), dZ) + l2 * W1
            gb1 = dZ.sum(axis=1)
            if not np.isfinite(gw2).all():
                break
            vW1 = self._momentum * vW1 - lr * gW1
            vb1 = self._momentum * vb1 - lr * gb1
            vw2 = self._momentum * vw2 - lr * gw2
            vb2 = self._momentum * vb2 - lr * gb2
            W1 += vW1
            b1 += vb1
            w2 += vw2
            b2 += vb2
        if not (np.isfinite(W1).all() and np.isfinite(w2).all()):
            raise FamilyFitError("feed-forward net diverged")
        return _NetMembers(W1, b1, w2, b2, stds)


_REGISTRY = {
    cls.family_id: cls
    for cls in (
        RidgeFamily,
        LassoFamily,
        ElasticFamily,
        KnnFamily,
        RandomForestFamily,
        BoostedTreesFamily,
        FeedForwardNetFamily,
    )
}


def get_family(family_id: str) -> Family:
    if family_id not in _REGISTRY:
        raise KeyError(f"unknown surrogate family {family_id!r}")
    return _REGISTRY[family_id]()
