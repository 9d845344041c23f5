"""Cohort-level workflows: annotate, pretrain, train, parcellate, evaluate."""

import logging
from pathlib import Path
from typing import NamedTuple

from . import io
from .annotation import FeatureTable, LabelMap, VoxelGrid, annotate
from .baselines import DcecModel, dcec_train, flat_nmf_parcellate
from .cae import CaeModel, pretrain
from .dnmfc import DnmfcModel, TrainConfig, parcellate, train
from .errors import InvalidInputError
from .metrics import evaluate, select_k
from .synth import subject_dir

log = logging.getLogger(__name__)

METHODS = ("dnmfc", "dcec", "nmf")


class SubjectData(NamedTuple):
    id: str
    grid: VoxelGrid
    features: FeatureTable
    truth: LabelMap = None


def from_generated(subjects):
    return [SubjectData(subject_dir(s.index), s.grid, annotate(s.bundles, s.grid), s.truth)
            for s in subjects]


def load_cohort(cohort_dir):
    """Read a cohort directory written by ``synth`` and annotate every subject."""
    root = Path(cohort_dir)
    manifest = io.read_json(root / "manifest.json")
    out = []
    for entry in manifest["subjects"]:
        grid = io.read_mask(root / entry["mask"])
        bundles = io.read_streamlines(root / entry["streamlines"])
        truth = io.read_label_map(root / entry["truth"]) if entry.get("truth") else None
        out.append(SubjectData(entry["id"], grid, annotate(bundles, grid), truth))
    return out


def default_n_train(n_subjects):
    return max(1, (2 * n_subjects) // 3)


def split(subjects, n_train=None):
    n_train = default_n_train(len(subjects)) if n_train is None else n_train
    if not 1 <= n_train < len(subjects):
        raise InvalidInputError(
            f"need 1 <= n_train < {len(subjects)} subjects, got n_train={n_train}")
    return subjects[:n_train], subjects[n_train:]


def fit(method, cae, tables, config):
    if method == "dnmfc":
        return train(cae, tables, config)
    if method == "dcec":
        return dcec_train(cae, tables, config)
    raise InvalidInputError(f"unknown trainable method {method!r}")


def label_subjects(method, model, subjects, config, apply_filter=True):
    if method == "nmf":
        return [flat_nmf_parcellate(s.features, config.K, config.seed) for s in subjects]
    return [parcellate(model, s.features, s.grid, apply_filter) for s in subjects]


def report(method, maps, subjects, config):
    truths = [s.truth for s in subjects] if all(s.truth is not None for s in subjects) else None
    return evaluate(method, maps, [s.features for s in subjects], config.K, truths=truths,
                    subjects=[s.id for s in subjects], seed=config.seed, config=config.to_dict())


def compare(subjects, config, n_train=None, cae=None, methods=METHODS):
    """Train every method on the training split and evaluate on the test split.

    Returns ``(rows, models)`` where rows maps method name to a MetricsReport.
    """
    train_set, test_set = split(subjects, n_train)
    tables = [s.features for s in train_set]
    if cae is None:
        cae = pretrain(tables, epochs=config.pretrain_epochs, seed=config.seed,
                       batch_size=config.batch_size, lr=config.lr)
    rows, models = {}, {}
    for method in methods:
        model = None if method == "nmf" else fit(method, cae, tables, config)
        maps = label_subjects(method, model, test_set, config)
        rows[method] = report(method, maps, test_set, config)
        models[method] = model
        log.info("%s: S=%s dice_mean=%.4f", method, rows[method].S, rows[method].dice_mean)
    return rows, models


def sweep_k(subjects, config, kmin, kmax, n_train=None, cae=None, method="dnmfc"):
    """Mean test Dice per candidate K (one shared pretrained CAE) and the best K."""
    if kmin < 2 or kmax < kmin:
        raise InvalidInputError(f"invalid K range {kmin}..{kmax}")
    train_set, test_set = split(subjects, n_train)
    tables = [s.features for s in train_set]
    if cae is None:
        cae = pretrain(tables, epochs=config.pretrain_epochs, seed=config.seed,
                       batch_size=config.batch_size, lr=config.lr)
    means, rows = {}, {}
    for K in range(kmin, kmax + 1):
        cfg = TrainConfig.from_dict({**config.to_dict(), "K": K})
        model = None if method == "nmf" else fit(method, cae, tables, cfg)
        maps = label_subjects(method, model, test_set, cfg)
        rows[K] = report(method, maps, test_set, cfg)
        means[K] = rows[K].dice_mean
    return select_k(means), means, rows


def load_model(path):
    data = io.read_json(path)
    method = data.get("method")
    if method == "dnmfc":
        return DnmfcModel.from_dict(data)
    if method == "dcec":
        return DcecModel.from_dict(data)
    if "layers" in data:
        raise InvalidInputError(f"{path} is a CAE checkpoint, not a trained clustering model")
    raise InvalidInputError(f"{path}: unknown model method {method!r}")


def load_cae(path):
    data = io.read_json(path)
    try:
        return CaeModel.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"{path}: not a CAE checkpoint ({exc})")
