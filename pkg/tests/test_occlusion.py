from __future__ import annotations

import numpy as np
import pytest

import oracles
from neuroquant.errors import GridMismatch, ScorerChannelMismatch
from neuroquant.nifti import load_nifti
from neuroquant.occlusion import (ConstantScorer, LinearScorer, NetworkScorer, case_report, mid_slice_montage,
                                  occlusion_map, read_pgm, write_pgm)
from neuroquant.volume3d import Volume3D, affine_for_orientation


class CountingScorer:
    def __init__(self, inner):
        self.inner, self.in_channels, self.images = inner, inner.in_channels, []

    def score_batch(self, batch):
        self.images.extend(np.array(b) for b in batch)
        return self.inner.score_batch(batch)


@pytest.mark.parametrize("kernel", [1, 3, 5])
def test_linear_scorer_analytic(kernel, rng):
    x = rng.normal(size=(2, 6, 5, 7))
    w = rng.normal(0, 0.1, x.shape)
    amap = occlusion_map(x, LinearScorer(w, 0.3), kernel=kernel)
    assert np.max(np.abs(amap.delta - oracles.linear_oracle(x, w, 0.3, kernel))) < 1e-10
    assert amap.values.min() == 0.0 and amap.values.max() == 1.0
    assert amap.values[np.unravel_index(np.argmax(amap.delta), amap.delta.shape)] == 0.0


def test_zero_background_has_no_impact(rng):
    x = np.zeros((1, 12, 12, 12))
    x[0, 8:, 8:, 8:] = rng.uniform(0.5, 1.0, (4, 4, 4))
    amap = occlusion_map(x, LinearScorer(rng.normal(size=x.shape)), kernel=3)
    assert amap.delta[1, 1, 1] == 0.0
    assert amap.values[1, 1, 1] == 1.0


def test_exhaustive_tiny_case(rng):
    x = rng.normal(size=(1, 3, 3, 3))
    counter = CountingScorer(LinearScorer(rng.normal(size=x.shape)))
    amap = occlusion_map(x, counter, kernel=1)
    assert amap.values.shape == (3, 3, 3)
    occluded = counter.images[1:]
    assert len(occluded) == 27                      # one per center, after the baseline call
    zeroed = {tuple(np.argwhere(img[0] != x[0])[0]) for img in occluded}
    assert len(zeroed) == 27


def test_stride_consistency(rng):
    x = rng.normal(size=(2, 7, 6, 5))
    scorer = LinearScorer(rng.normal(0, 0.2, x.shape), -0.1)
    full = occlusion_map(x, scorer, kernel=3, stride=1)
    coarse = occlusion_map(x, scorer, kernel=3, stride=2)
    centers = np.ix_(range(0, 7, 2), range(0, 6, 2), range(0, 5, 2))
    assert np.array_equal(full.raw[centers], coarse.raw[centers])
    # voxel 1 lies between centers 0 and 2 and takes the lower one; voxel 3 takes 2
    assert coarse.raw[1, 0, 0] == coarse.raw[0, 0, 0]
    assert coarse.raw[3, 0, 0] == coarse.raw[2, 0, 0]
    assert coarse.raw[6, 5, 4] == coarse.raw[6, 4, 4]


def test_constant_scorer_degenerate(rng):
    amap = occlusion_map(rng.normal(size=(1, 4, 4, 4)), ConstantScorer(0.7), kernel=3)
    assert amap.degenerate and np.all(amap.values == 1.0)


def test_single_channel_masking(rng):
    x = rng.normal(size=(2, 4, 4, 4))
    w = rng.normal(size=x.shape)
    amap = occlusion_map(x, LinearScorer(w), kernel=3, channels=[1])
    w_only = w.copy()
    w_only[0] = 0.0
    z = float(np.sum(w * x))
    x1 = np.zeros_like(x)
    x1[1] = x[1]
    ref = oracles.linear_oracle(x1, w, z - float(np.sum(w * x1)), 3)
    assert np.max(np.abs(amap.delta - ref)) < 1e-10
    assert amap.channels == (1,)


def test_errors(rng):
    with pytest.raises(ScorerChannelMismatch):
        occlusion_map(rng.normal(size=(2, 3, 3, 3)), LinearScorer(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        occlusion_map(rng.normal(size=(1, 3, 3, 3)), ConstantScorer(), kernel=4)
    with pytest.raises(ValueError):
        occlusion_map(rng.normal(size=(1, 3, 3, 3)), ConstantScorer(), stride=0)


def test_volume_input_and_network_scorer(rng):
    from neuroquant.network import BlockSpec, MBConvNet, NetworkConfig
    cfg = NetworkConfig(in_channels=2, stem_channels=2, head_channels=3, input_shape=(8, 8, 8),
                        blocks=(BlockSpec(1, 2, 2),))
    net = MBConvNet(cfg)
    params = [net.init_params(0), net.init_params(1)]
    aff = affine_for_orientation("LPI", (1, 1, 1), (4, 5, 6))
    vols = [Volume3D(rng.normal(size=(8, 8, 8)), aff) for _ in range(2)]
    scorer = NetworkScorer(net, params)
    amap = occlusion_map(vols, scorer, kernel=3, stride=4)
    assert np.array_equal(amap.affine, aff)
    x = np.stack([v.data for v in vols])[None]
    want = np.mean([net.predict(p, x)[0] for p in params])
    assert amap.baseline == pytest.approx(want, abs=1e-15)
    assert np.all((amap.values >= 0) & (amap.values <= 1))


def test_pgm_roundtrip(tmp_path):
    img = np.arange(256, dtype=np.uint8).reshape(16, 16)   # includes whitespace-valued bytes
    assert np.array_equal(read_pgm(write_pgm(img, tmp_path / "a.pgm")), img)
    mont = mid_slice_montage(np.random.default_rng(0).normal(size=(5, 6, 7)))
    assert mont.dtype == np.uint8 and mont.shape[0] == 6


def test_case_report(tmp_path, rng):
    vols = [Volume3D(rng.normal(size=(6, 6, 6))) for _ in range(2)]
    pet = Volume3D(rng.uniform(1, 2, (6, 6, 6)))
    amap = occlusion_map(vols, LinearScorer(rng.normal(size=(2, 6, 6, 6))), kernel=3)
    out = case_report(vols, pet, amap, tmp_path / "case")
    assert {"t1w", "flair", "pet", "map", "map_montage"} <= set(out)
    back = load_nifti(out["map"])
    assert back.data.tobytes() == amap.values.tobytes()
    with pytest.raises(GridMismatch):
        case_report(vols, Volume3D(np.ones((5, 6, 6))), amap, tmp_path / "bad")
