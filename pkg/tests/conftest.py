from pathlib import Path

import numpy as np
import pytest

from core.inputs import read_table
from core.km import SurvivalDataset, order_dataset

DATA_DIR = Path(__file__).resolve().parent.parent / "data"

RAT_TIMES = [9, 13, 13, 18, 23, 28, 31, 34, 45, 48]
RAT_STATUSES = [1, 1, 0, 1, 1, 0, 1, 0, 1, 0]


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def rats():
    return order_dataset(SurvivalDataset(RAT_TIMES, RAT_STATUSES, np.ones((10, 1))))


@pytest.fixture
def larynx():
    return order_dataset(read_table(DATA_DIR / "larynx.csv").to_dataset())


@pytest.fixture
def channing_male():
    return order_dataset(read_table(DATA_DIR / "channing_male.csv").to_dataset())


def random_censored(rng, n=40, p=2, censor_rate=0.4, ties=False):
    """AFT 風の乱数データ。最大観測は打ち切り"""
    X = rng.standard_normal((n, p))
    T = np.exp(0.5 + X @ np.linspace(1.0, 0.5, p) + 0.5 * rng.standard_normal(n))
    C = np.exp(rng.uniform(-1.0, 3.0, n))
    C = np.where(rng.uniform(size=n) < censor_rate, np.minimum(C, T * 0.9), np.inf)
    obs = np.minimum(T, C)
    st = (T <= C).astype(int)
    if ties:
        obs = np.ceil(obs * 4) / 4
    i = int(np.argmax(obs))
    st[i] = 0
    return order_dataset(SurvivalDataset(obs, st, X))
