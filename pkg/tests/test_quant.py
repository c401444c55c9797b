from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuroquant.errors import ConfigError, EmptyMask, GridMismatch, ZeroReference
from neuroquant.quant import (Status, Tracer, TracerCalibration, centiloid_from_suvr, classify_status, compute_suvr,
                              load_calibration_profiles, profile_for, quantify, suvr_from_centiloid)
from neuroquant.volume3d import Volume3D


def masks(shape=(6, 6, 6)):
    t = np.zeros(shape)
    t[1:4, 1:4, 1:4] = 1
    r = np.zeros(shape)
    r[4:6, 4:6, :2] = 1
    return Volume3D(t), Volume3D(r)


def test_uniform_pet():
    t, r = masks()
    assert compute_suvr(Volume3D(np.full((6, 6, 6), 3.7)), t, r) == pytest.approx(1.0, rel=1e-15)


def test_constructed_ratio():
    t, r = masks()
    pet = np.where(t.data > 0, 1.5, 1.0)
    assert compute_suvr(Volume3D(pet), t, r) == pytest.approx(1.5, rel=1e-15)


def test_random_pet_two_pass_oracle(rng):
    t, r = masks()
    pet = rng.uniform(0.5, 2.0, (6, 6, 6))
    num = den = 0.0
    nt = nr = 0
    for idx in np.ndindex(6, 6, 6):
        if t.data[idx]:
            num += pet[idx]
            nt += 1
        if r.data[idx]:
            den += pet[idx]
            nr += 1
    assert compute_suvr(Volume3D(pet), t, r) == pytest.approx((num / nt) / (den / nr), rel=1e-12)


def test_suvr_errors():
    t, r = masks()
    with pytest.raises(EmptyMask):
        compute_suvr(Volume3D(np.ones((6, 6, 6))), t, Volume3D(np.zeros((6, 6, 6))))
    with pytest.raises(ZeroReference):
        compute_suvr(Volume3D(np.where(r.data > 0, 0.0, 1.0)), t, r)
    with pytest.raises(GridMismatch):
        compute_suvr(Volume3D(np.ones((5, 6, 6))), t, r)


def test_centiloid_examples():
    anchor = TracerCalibration("custom", 100.0, -100.0, 20.0)
    assert centiloid_from_suvr(1.0, anchor) == 0.0
    assert centiloid_from_suvr(2.0, anchor) == 100.0
    fbb = TracerCalibration("FBB", 153.4, -154.9, 12.0)
    assert centiloid_from_suvr(1.2, fbb) == pytest.approx(29.18, abs=1e-9)
    assert suvr_from_centiloid(29.18, fbb) == pytest.approx(1.2, abs=1e-12)


def test_classify_examples():
    profiles = load_calibration_profiles()
    assert profiles["FBB"].cutoff_cl == 12.0
    assert profiles["FBP"].cutoff_cl == 18.0
    assert profiles["OASIS3"].cutoff_cl == 20.6
    assert classify_status(30.0, profiles["FBB"]) is Status.POSITIVE
    assert classify_status(17.9, profiles["FBP"]) is Status.NEGATIVE
    assert classify_status(20.6, profiles["OASIS3"]) is Status.POSITIVE
    strict = TracerCalibration("FBP", 1.0, 0.0, 20.6, inclusive=False)
    assert classify_status(20.6, strict) is Status.NEGATIVE


def test_invalid_calibration():
    with pytest.raises(ConfigError):
        TracerCalibration("FBB", 0.0, 0.0, 12.0)
    with pytest.raises(ConfigError):
        TracerCalibration("FBB", 1.0, 0.0, float("inf"))


def test_profile_lookup(tmp_path):
    profiles = load_calibration_profiles()
    assert profile_for("OASIS3", "FBP", profiles).cutoff_cl == 20.6
    assert profile_for("ADNI", "FBB", profiles).tracer is Tracer.FBB
    with pytest.raises(ConfigError):
        profile_for("X", "PiB", profiles)
    p = tmp_path / "cal.json"
    p.write_text(json.dumps({"profiles": {"A4": {"tracer": "FBP", "slope": 2, "intercept": 1, "cutoff_cl": 5}}}))
    assert load_calibration_profiles(p)["A4"].slope == 2.0


def test_quantify_status_consistent(rng):
    t, r = masks()
    cal = load_calibration_profiles()["FBP"]
    for _ in range(20):
        pet = Volume3D(np.where(t.data > 0, rng.uniform(0.9, 1.6), 1.0))
        res = quantify(pet, t, r, cal)
        assert (res.status is Status.POSITIVE) == (res.centiloid >= cal.cutoff_cl)


@given(st.floats(-200, 200), st.floats(-200, 200))
def test_classify_monotone(a, b):
    cal = TracerCalibration("FBP", 175.4, -182.3, 18.0)
    lo, hi = min(a, b), max(a, b)
    assert not (classify_status(lo, cal) is Status.POSITIVE and classify_status(hi, cal) is Status.NEGATIVE)
    assert centiloid_from_suvr(1.0 + hi / 1000, cal) >= centiloid_from_suvr(1.0 + lo / 1000, cal)


@given(st.floats(1e-3, 1e3))
def test_suvr_scale_invariant(c):
    t, r = masks()
    pet = np.random.default_rng(3).uniform(0.5, 2.0, (6, 6, 6))
    a = compute_suvr(Volume3D(pet), t, r)
    b = compute_suvr(Volume3D(pet * c), t, r)
    assert b == pytest.approx(a, rel=1e-12)
