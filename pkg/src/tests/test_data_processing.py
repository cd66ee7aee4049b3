import numpy as np
import pytest

from src.components.simstudy import builtin_setting, generate_dataset
from src.utils.data_processing import dataset_to_frame, load_dataset_csv, write_dataset_csv
from src.utils.exceptions import ParseError
from src.utils.numerics import RngStream


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_two_rows(tmp_path):
    path = _write(tmp_path, "subject_id,time,y,s,x_1,z_1\nA,1,3,10,0.0,1.5\nA,2,0,8,1.0,-0.5\n")
    data = load_dataset_csv(path)
    assert data.n_subjects == 1 and data.n_obs == 2
    assert data.dim_x == 1 and data.dim_z == 1
    np.testing.assert_array_equal(data.y, [3, 0])
    np.testing.assert_array_equal(data.z[:, 0], [1.5, -0.5])


def test_rows_sorted_by_time_within_subject(tmp_path):
    path = _write(tmp_path, "subject_id,time,y,s\nB,2,1,5\nA,1,0,4\nB,1,2,5\n")
    data = load_dataset_csv(path)
    assert data.subject_ids == ["B", "A"]
    np.testing.assert_array_equal(data.y, [2, 1, 0])
    assert data.dim_x == 0


def test_explicit_covariate_selection(tmp_path):
    path = _write(tmp_path, "subject_id,time,y,s,x_1,x_2,z_1\nA,1,3,10,0,1,2\n")
    data = load_dataset_csv(path, x_columns=["x_2"], z_columns=[])
    assert data.dim_x == 1 and data.dim_z == 0
    assert data.x[0, 0] == 1.0


def test_count_above_trials_names_row(tmp_path):
    path = _write(tmp_path, "subject_id,time,y,s\nA,1,3,10\nA,2,12,10\n")
    with pytest.raises(ParseError) as err:
        load_dataset_csv(path)
    assert err.value.row == 2
    assert "row 2" in str(err.value)


def test_missing_column(tmp_path):
    path = _write(tmp_path, "subject_id,time,y\nA,1,3\n")
    with pytest.raises(ParseError, match="s"):
        load_dataset_csv(path)


def test_missing_requested_covariate(tmp_path):
    path = _write(tmp_path, "subject_id,time,y,s\nA,1,3,10\n")
    with pytest.raises(ParseError):
        load_dataset_csv(path, x_columns=["x_1"])


def test_non_integer_count(tmp_path):
    path = _write(tmp_path, "subject_id,time,y,s\nA,1,2.5,10\n")
    with pytest.raises(ParseError) as err:
        load_dataset_csv(path)
    assert err.value.row == 1


def test_missing_file(tmp_path):
    with pytest.raises(ParseError):
        load_dataset_csv(tmp_path / "absent.csv")


def test_written_dataset_loads_back(tmp_path):
    data, _ = generate_dataset(builtin_setting(3, n_subjects=4, t_per_subject=3), RngStream(8))
    path = tmp_path / "sim.csv"
    write_dataset_csv(data, path)
    again = load_dataset_csv(path)
    assert again.subject_ids == data.subject_ids
    np.testing.assert_array_equal(again.y, data.y)
    np.testing.assert_array_equal(again.s, data.s)
    np.testing.assert_array_equal(again.x, data.x)
    np.testing.assert_array_equal(again.occasion, data.occasion)


def test_frame_layout(tiny_data):
    frame = dataset_to_frame(tiny_data)
    assert list(frame.columns) == ["subject_id", "time", "y", "s", "x_1", "z_1"]
    assert len(frame) == 5
