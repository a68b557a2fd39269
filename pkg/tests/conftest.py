import numpy as np
import pytest

from mmforecast.core import ClassTable, LogitVolume, SampleSet, SegMap, default_class_table


@pytest.fixture
def table():
    return default_class_table()


@pytest.fixture
def tiny_table():
    # 3 scoreable classes + void, for hand-checkable cases
    return ClassTable(names=("a", "b", "c", "void"), void_id=3,
                      movable_ids=frozenset({2}))


def random_sample_set(rng, k, c, h, w, table):
    samples = tuple(LogitVolume(rng.normal(size=(c, h, w)), table) for _ in range(k))
    return SampleSet(samples=samples, noise_seeds=tuple(range(k)))


def random_seg(rng, h, w, table, allow_void=True):
    hi = len(table.names) if allow_void else table.n_classes
    return SegMap(rng.integers(0, hi, size=(h, w)), table)
