import logging
import os

import numpy as np
import pandas as pd
import pytest

from capclust.utils.errors import EmptyCluster, InvalidInput
from capclust.utils.helpers import (
    OutputTracker,
    derive_rng,
    derive_seed,
    dumps_json,
    ensure_directory_exists,
    file_digest,
    format_error_message,
    load_json,
    logger,
    save_csv,
    save_json,
    setup_logging,
)


@pytest.fixture
def temp_directory(tmp_path):
    return str(tmp_path)


def test_ensure_directory_exists(temp_directory):
    test_dir = os.path.join(temp_directory, "test_dir")
    ensure_directory_exists(test_dir)
    assert os.path.exists(test_dir)


def test_save_and_load_json(temp_directory):
    test_data = {"key": "value", "gamma": np.array([0.1, 1.0 / 3.0])}
    test_file = os.path.join(temp_directory, "nested", "test.json")
    save_json(test_data, test_file)
    loaded_data = load_json(test_file)
    assert loaded_data["key"] == "value"
    assert loaded_data["gamma"] == [0.1, 1.0 / 3.0]


def test_dumps_json_rejects_nan():
    with pytest.raises(ValueError):
        dumps_json({"value": float("nan")})


def test_dumps_json_numpy_scalars():
    assert dumps_json({"n": np.int64(3), "x": np.float64(0.5)}, indent=None) == '{"n": 3, "x": 0.5}'


def test_save_csv_round_trips_floats(temp_directory):
    values = np.random.default_rng(0).standard_normal(20) * 1e-3
    path = os.path.join(temp_directory, "table.csv")
    save_csv(pd.DataFrame({"value": values}), path)
    loaded = pd.read_csv(path, float_precision="round_trip")
    assert np.array_equal(loaded["value"].to_numpy(), values)


def test_file_digest(temp_directory):
    path = os.path.join(temp_directory, "data.txt")
    with open(path, "w") as f:
        f.write("abc")
    assert file_digest(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_derive_rng_is_reproducible():
    first = derive_rng(7, "restart", 2).standard_normal(5)
    second = derive_rng(7, "restart", 2).standard_normal(5)
    assert np.array_equal(first, second)


def test_derive_rng_streams_differ():
    a = derive_rng(7, "restart", 1).standard_normal(5)
    b = derive_rng(7, "restart", 2).standard_normal(5)
    c = derive_rng(8, "restart", 1).standard_normal(5)
    assert not np.allclose(a, b)
    assert not np.allclose(a, c)


def test_derive_rng_rejects_negative_keys():
    with pytest.raises(InvalidInput):
        derive_rng(0, -1)


def test_derive_seed():
    seed = derive_seed(3, "replication", 0)
    assert isinstance(seed, int)
    assert 0 <= seed < 2**32
    assert seed == derive_seed(3, "replication", 0)
    assert seed != derive_seed(3, "replication", 1)


def test_format_error_message():
    assert format_error_message(EmptyCluster(2)).startswith("EmptyCluster: EmptyCluster(2)")
    assert format_error_message(PermissionError("Access denied")) == "Permission denied: Access denied"
    assert format_error_message(FileNotFoundError("File not found")) == "File not found: File not found"
    assert format_error_message(Exception("Generic error")) == "Error: Generic error"


def test_setup_logging_accepts_level_names():
    setup_logging("debug")
    assert logger.level == logging.DEBUG
    setup_logging(logging.INFO)
    assert logger.level == logging.INFO


def test_setup_logging_rejects_unknown_level():
    with pytest.raises(InvalidInput):
        setup_logging("chatty")


def test_output_tracker_keeps_files_on_success(temp_directory):
    out = os.path.join(temp_directory, "out")
    with OutputTracker(out) as outputs:
        save_json({"a": 1}, outputs.path("a.json"))
    assert os.path.exists(os.path.join(out, "a.json"))


def test_output_tracker_removes_partial_outputs(temp_directory):
    out = os.path.join(temp_directory, "out")
    with pytest.raises(RuntimeError), OutputTracker(out) as outputs:
        save_json({"a": 1}, outputs.path("a.json"))
        raise RuntimeError("stage failed")
    assert not os.path.exists(out)
