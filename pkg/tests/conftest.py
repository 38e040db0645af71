import pytest

from leafsearch.enhanced import enhance
from leafsearch.mlp import TrainConfig
from leafsearch.select import RuntimeConstants, SelectionBudget
from leafsearch.series import generate_randwalk, make_queries
from leafsearch.traingen import SplitPlan
from leafsearch.tree import build_index

# Injected constants keep unit tests independent of wall-clock measurement noise.
FIXED_CONSTANTS = RuntimeConstants(t_series=2e-7, t_filter=6e-6, filter_bytes=5 * 1024)


@pytest.fixture(scope="session")
def small_data():
    return generate_randwalk(2000, 32, seed=7)


@pytest.fixture(scope="session")
def small_index(small_data):
    return build_index(small_data, max_leaf_size=128)


@pytest.fixture(scope="session")
def small_queries(small_data):
    return make_queries(small_data, 40, 0.2, seed=31)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """A complete small enhancement: dataset, index, and filters on disk."""
    data = generate_randwalk(4000, 32, seed=17)
    index = build_index(data, max_leaf_size=200)
    out_dir = tmp_path_factory.mktemp("enhanced")
    plan = SplitPlan(n_global=240, n_local=80, calibration=60)
    eidx = enhance(
        index,
        plan,
        SelectionBudget(capacity_bytes=16 * 1024 * 1024),
        seed=23,
        out_dir=out_dir,
        constants=FIXED_CONSTANTS,
        train_cfg=TrainConfig(max_epochs=150),
        workers=1,
    )
    return {"data": data, "index": index, "eidx": eidx, "dir": out_dir, "plan": plan}
