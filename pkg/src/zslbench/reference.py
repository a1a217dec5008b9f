"""Reference benchmark tables for the five base classifiers and six fusion schemes.

These are the published evaluation results on the five standard zero-shot
benchmarks (CUB, AWA1, AWA2, aPY, SUN) that the combined-points, difficulty,
and ceiling analyses operate on. Values are stored exactly as published
(two-decimal rounding included), so re-ranking them can differ from the
published points tables wherever rounding collapsed genuinely distinct
values into a tie; the test suite documents those cells.
"""

from __future__ import annotations

import numpy as np

DATASETS = ("CUB", "AWA1", "AWA2", "aPY", "SUN")
BASE_CLASSIFIERS = ("DeViSE", "ALE", "SJE", "ESZSL", "SAE")
META_CLASSIFIERS = ("MV", "MDT", "DNN", "GT", "Con", "Auc")
MEASURES = ("top1", "top5", "logloss", "f1")
LOWER_BETTER = ("logloss",)

# Base classifiers, rows in BASE_CLASSIFIERS order, columns in DATASETS order.
BASE_TOP1 = np.array([
    [46.82, 53.97, 57.43, 32.55, 55.42],
    [56.34, 56.34, 51.89, 33.40, 62.01],
    [49.17, 58.63, 59.88, 31.32, 52.64],
    [53.91, 56.19, 54.50, 38.48, 55.63],
    [39.13, 51.50, 51.77, 15.92, 52.71],
])

BASE_TOP5 = np.array([
    [51.45, 65.34, 69.03, 61.01, 57.78],
    [64.44, 63.44, 63.01, 60.88, 64.24],
    [54.27, 67.54, 68.54, 60.82, 55.14],
    [58.25, 64.91, 64.52, 57.93, 57.92],
    [44.97, 65.56, 66.98, 49.29, 56.18],
])

BASE_LOGLOSS = np.array([
    [3.36, 2.20, 1.67, 2.30, 3.69],
    [1.87, 1.88, 1.92, 2.53, 3.68],
    [2.93, 1.41, 1.49, 2.30, 3.40],
    [2.36, 1.49, 1.45, 7.04, 3.36],
    [3.60, 2.06, 2.03, 2.51, 3.92],
])

BASE_F1 = np.array([
    [0.47, 0.48, 0.55, 0.27, 0.55],
    [0.53, 0.53, 0.42, 0.30, 0.62],
    [0.49, 0.55, 0.55, 0.43, 0.53],
    [0.54, 0.57, 0.53, 0.25, 0.56],
    [0.39, 0.44, 0.45, 0.08, 0.53],
])

# Fusion schemes, rows in META_CLASSIFIERS order.
META_TOP1 = np.array([
    [53.43, 58.71, 56.56, 32.72, 61.94],
    [47.89, 56.43, 51.89, 33.40, 62.08],
    [48.63, 57.56, 54.72, 34.89, 60.63],
    [46.58, 56.75, 59.00, 32.63, 59.51],
    [46.82, 53.97, 57.43, 32.55, 55.42],
    [47.89, 56.34, 51.89, 33.40, 62.01],
])

META_F1 = np.array([
    [0.54, 0.55, 0.52, 0.34, 0.62],
    [0.48, 0.53, 0.42, 0.31, 0.62],
    [0.49, 0.53, 0.46, 0.28, 0.60],
    [0.36, 0.26, 0.37, 0.24, 0.34],
    [0.47, 0.26, 0.36, 0.27, 0.55],
    [0.48, 0.53, 0.42, 0.31, 0.62],
])

# Share of test instances identified by exactly 0..5 base classifiers, in
# percent, one row per dataset. The AWA2 row sums to 98.01 as published (the
# other rows sum to 100 +- 0.01).
DIFFICULTY_LEVELS = {
    "CUB": (23.86, 15.98, 13.11, 12.40, 15.23, 19.41),
    "AWA1": (20.47, 15.67, 11.29, 12.19, 19.33, 21.04),
    "AWA2": (21.88, 12.95, 13.46, 14.62, 12.26, 22.84),
    "aPY": (36.37, 25.76, 15.75, 11.75, 9.53, 0.85),
    "SUN": (19.31, 12.78, 10.69, 12.50, 16.88, 27.85),
}

# Published selector-fusion ceilings (100 minus level 0, after rounding).
CEILINGS = {"CUB": 76.13, "AWA1": 79.53, "AWA2": 78.13, "aPY": 63.63, "SUN": 80.7}

# Published combined-points tables.
BASE_POINTS = {
    "DeViSE": (8, 8, 17, 16, 11, 60),
    "ALE": (19, 11, 7, 15, 18, 70),
    "SJE": (12, 19, 18, 15, 8, 72),
    "ESZSL": (17, 14, 14, 11, 17, 73),
    "SAE": (4, 8, 8, 7, 6, 33),
}

META_POINTS = {
    "MV": (12, 12, 10, 10, 10, 54),
    "MDT": (8, 8, 6, 10, 12, 44),
    "DNN": (10, 10, 8, 10, 8, 46),
    "GT": (4, 8, 9, 5, 5, 31),
    "Con": (6, 5, 7, 5, 5, 28),
    "Auc": (8, 7, 6, 10, 11, 42),
}

JOINT_POINTS = {
    "DeViSE": (13, 12, 20, 12, 13, 70),
    "ALE": (21, 15, 11, 17, 21, 85),
    "SJE": (17, 20, 22, 16, 10, 85),
    "ESZSL": (21, 16, 16, 16, 15, 84),
    "SAE": (10, 10, 11, 7, 11, 49),
    "MV": (20, 21, 17, 18, 20, 96),
    "MDT": (15, 16, 11, 18, 22, 82),
    "DNN": (17, 18, 15, 17, 18, 85),
    "GT": (10, 14, 15, 11, 13, 63),
    "Con": (13, 10, 13, 12, 13, 61),
    "Auc": (15, 15, 11, 18, 21, 80),
}


def base_value_cube() -> np.ndarray:
    """(5 classifiers x 5 datasets x 4 measures) cube of the base tables."""
    return np.stack([BASE_TOP1, BASE_TOP5, BASE_LOGLOSS, BASE_F1], axis=2)


def meta_value_cube() -> np.ndarray:
    """(6 schemes x 5 datasets x 2 measures) cube: top-1 and F1."""
    return np.stack([META_TOP1, META_F1], axis=2)


def joint_value_cube() -> np.ndarray:
    """(11 competitors x 5 datasets x 2 measures): bases then fusion schemes."""
    top1 = np.vstack([BASE_TOP1, META_TOP1])
    f1 = np.vstack([BASE_F1, META_F1])
    return np.stack([top1, f1], axis=2)


JOINT_COMPETITORS = BASE_CLASSIFIERS + META_CLASSIFIERS
