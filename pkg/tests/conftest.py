from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")



def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def multicontrast_run():
    """The channel-2-signal phantom experiment, trained once per session.

    200 train / 50 validation / 100 test exams, tiny preset, 30 epochs,
    1- and 2-channel models.
    """
    from neuroquant.metrics import auc_mann_whitney
    from neuroquant.network import MBConvNet, TrainingConfig, aggregate_fold_scores, preset, train
    from neuroquant.phantom import PhantomSpec, generate_cohort

    start = time.perf_counter()
    spec = PhantomSpec(n_subjects=350, ch1_effect_mm=0.0, ch2_effect=0.6, longitudinal_fraction=0.0, seed=7)
    cohort = generate_cohort(spec, render=False)
    x = cohort.arrays(dtype=np.float32)
    y = cohort.labels
    perm = np.random.default_rng(0).permutation(len(y))
    tr, va, te = perm[:200], perm[200:250], perm[250:]
    folds = np.arange(len(tr)) % 5
    cfg = TrainingConfig(epochs=30, warmup_epochs=3, lr_max=3e-3, seed=0)
    out = {"y_test": y[te], "y_train": y[tr], "folds": folds}
    for ch in (1, 2):
        res = train(x[tr, :ch], y[tr], folds, preset("tiny", ch), cfg, x[va, :ch], y[va], x[te, :ch])
        net = MBConvNet(preset("tiny", ch))
        train_scores = np.mean([net.predict(p, x[tr, :ch]) for p in res.checkpoints], axis=0)
        out[ch] = {"result": res, "test": aggregate_fold_scores(res.test_scores),
                   "train_auc": auc_mann_whitney(train_scores, y[tr])}
    out["seconds"] = time.perf_counter() - start
    return out
