import numpy as np
import pytest

from core.errors import InputParseError, InvalidDataset
from core.inputs import parse_csv, read_table


def test_parse_valid_table():
    table = parse_csv("time,status,age,stage\n3.5,1,60,2\n1.0,0,55,1\n")
    assert table.covariate_names == ["age", "stage"]
    assert (table.n, table.p) == (2, 2)
    d = table.to_dataset()
    assert np.allclose(d.times, [3.5, 1.0])
    assert d.statuses.tolist() == [1, 0]


def test_empty_input():
    with pytest.raises(InputParseError) as e:
        parse_csv("  \n")
    assert e.value.line == 1


@pytest.mark.parametrize("text", ["t,status,x1\n1,1,0\n", "time,status\n1,1\n", "time,status,x,x\n1,1,0,0\n"])
def test_bad_header(text):
    with pytest.raises(InputParseError) as e:
        parse_csv(text)
    assert e.value.line == 1


def test_missing_and_non_numeric_cells_report_line():
    with pytest.raises(InputParseError) as e:
        parse_csv("time,status,x1\n1,1,0\n2,0,\n")
    assert e.value.line == 3
    with pytest.raises(InputParseError) as e:
        parse_csv("time,status,x1\n1,1,0\n2,0,1\n3,1,abc\n")
    assert e.value.line == 4
    assert "x1" in str(e.value)


def test_invalid_values():
    with pytest.raises(InvalidDataset, match="line 3"):
        parse_csv("time,status,x1\n1,1,0\n-2,0,1\n")
    with pytest.raises(InvalidDataset, match="status"):
        parse_csv("time,status,x1\n1,2,0\n")


def test_bundled_tables(data_dir):
    larynx = read_table(data_dir / "larynx.csv")
    assert (larynx.n, larynx.p) == (90, 4)
    assert int(larynx.frame["status"].sum()) == 50
    male = read_table(data_dir / "channing_male.csv")
    assert male.n == 97
    t = male.frame["time"]
    assert int(((t == t.max()) & (male.frame["status"] == 0)).sum()) == 19
