import numpy as np
import pytest

from lapinst.config import PipelineConfig
from lapinst.forest import RandomForest, Tree
from lapinst.pipeline import train_pipeline
from lapinst.synth import SynthParams, generate_dataset


def leaf_tree(dist):
    dist = np.asarray(dist, dtype=np.float64)
    return Tree(np.zeros(1, np.uint32), np.zeros(1), np.full(1, -1, np.int32),
                np.full(1, -1, np.int32), dist[None, :])


def stump(feature, threshold, left_dist, right_dist):
    return Tree(np.array([feature, 0, 0], np.uint32), np.array([threshold, 0.0, 0.0]),
                np.array([1, -1, -1], np.int32), np.array([2, -1, -1], np.int32),
                np.array([np.add(left_dist, right_dist) / 2, left_dist, right_dist], dtype=np.float64))


def constant_forest(dist, feature_dim):
    return RandomForest((leaf_tree(dist),), len(dist), feature_dim)


def random_tree(rng, feature_dim, num_classes, max_depth):
    feature, threshold, left, right, value = [], [], [], [], []

    def build(depth):
        node = len(feature)
        feature.append(0)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        v = rng.random(num_classes)
        value.append(v / v.sum())
        if depth < max_depth and rng.random() < 0.75:
            feature[node] = int(rng.integers(feature_dim))
            threshold[node] = float(rng.random())
            left[node] = build(depth + 1)
            right[node] = build(depth + 1)
        return node

    build(0)
    return Tree(np.array(feature, np.uint32), np.array(threshold), np.array(left, np.int32),
                np.array(right, np.int32), np.array(value))


def random_forest(rng, feature_dim=None, num_classes=None, num_trees=None, max_depth=6):
    d = feature_dim or int(rng.integers(1, 12))
    c = num_classes or int(rng.integers(2, 6))
    t = num_trees or int(rng.integers(1, 8))
    return RandomForest(tuple(random_tree(rng, d, c, max_depth) for _ in range(t)), c, d)


SMALL_CONFIG = PipelineConfig(seg_trees=8, seg_depth=8, cascade_trees=40, cascade_depth=6, bow_k=24,
                              seg_pixels_per_frame=600)


@pytest.fixture(scope="session")
def synth_dataset():
    return generate_dataset(SynthParams(seed=5, frames=36, surgeries=3))


@pytest.fixture(scope="session")
def small_model(synth_dataset):
    return train_pipeline(synth_dataset, SMALL_CONFIG, seed=1)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
