import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import random_table

from dmla.cli import SIM_ESTIMATOR_DEFAULTS, SIM_PRESETS
from dmla.data_model import EstimatorConfig, ObservationTable
from dmla.datafiles import (
    bundled_path,
    read_dataset,
    read_guesses,
    read_listings,
    write_dataset,
    write_listings,
)
from dmla.dml import run_dml, table_fingerprint
from dmla.errors import DataValidationError
from dmla.synth import DgpSpec, generate, generate_listings


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.booleans())
def test_dataset_roundtrip_is_exact(tmp_path_factory, seed, guesses):
    t = random_table(seed, n=12, p=3, guesses=guesses)
    path = tmp_path_factory.mktemp("ds")
    write_dataset(path, t, {"note": "x"})
    back, meta = read_dataset(path)
    np.testing.assert_array_equal(back.x, t.x)
    np.testing.assert_array_equal(back.y, t.y)
    assert list(back.ids) == list(t.ids)
    assert back.has_guesses == guesses
    assert meta["data_fingerprint"] == table_fingerprint(t) == table_fingerprint(back)
    assert meta["note"] == "x"


def _write_table(tmp_path, text):
    tmp_path.mkdir(exist_ok=True)
    (tmp_path / "table.csv").write_text(text)
    return tmp_path


@pytest.mark.parametrize(
    "text,needle",
    [
        ("", "empty file"),
        ("a,y,d,x_0\n", "header must start"),
        ("id,y,d,x_1\nr,1,2,3\n", "x_0..x_"),
        ("id,y,d,x_0\nr,1,2\n", ":2: 3 fields"),
        ("id,y,d,x_0\nr,1,two,3\n", ":2:"),
        ("id,y,d,x_0\nr,1,nan,3\n", "non-finite value in d"),
        ("id,y,d,x_0\n", "no rows"),
    ],
)
def test_read_dataset_errors(tmp_path, text, needle):
    with pytest.raises(DataValidationError, match=needle):
        read_dataset(_write_table(tmp_path / "ds", text))


def test_listings_roundtrip(tmp_path):
    listings = generate_listings(n=6, seed=3)
    back = read_listings(write_listings(tmp_path / "l.jsonl", listings))
    assert [l.to_dict() for l in back] == [l.to_dict() for l in listings]


@pytest.mark.parametrize(
    "line,needle",
    [
        ("{not json", "invalid JSON"),
        ("[1, 2]", "expected a JSON object"),
        ('{"id": "a", "price": "10", "feedback_score": 1, "image_embeddings": [[1.0]], "text_embedding": [1.0]}', "price"),
        ('{"id": "a", "price": 10, "feedback_score": 1.5, "image_embeddings": [[1.0]], "text_embedding": [1.0]}', "feedback_score"),
    ],
)
def test_read_listings_names_the_line(tmp_path, line, needle):
    good = json.dumps(generate_listings(n=2, seed=0)[0].to_dict())
    path = tmp_path / "l.jsonl"
    path.write_text(good + "\n\n" + line + "\n")
    with pytest.raises(DataValidationError, match=f":3: .*{needle}"):
        read_listings(path)


def test_read_listings_empty(tmp_path):
    (tmp_path / "e.jsonl").write_text("\n")
    with pytest.raises(DataValidationError, match="no listings"):
        read_listings(tmp_path / "e.jsonl")


def test_read_guesses(tmp_path):
    path = tmp_path / "g.csv"
    path.write_text("id,value\na,1.5\nb,2\n")
    assert read_guesses(path) == {"a": 1.5, "b": 2.0}
    path.write_text("id,value\na,1\na,2\n")
    with pytest.raises(DataValidationError, match="duplicate id"):
        read_guesses(path)
    path.write_text("key,value\na,1\n")
    with pytest.raises(DataValidationError, match="id and value"):
        read_guesses(path)
    path.write_text("id,value\na,many\n")
    with pytest.raises(DataValidationError, match=":2: bad value"):
        read_guesses(path)


def test_bundled_calibration_listings_match_generator():
    listings = read_listings(bundled_path("calibration_listings.jsonl"))
    assert len(listings) == 333
    assert [l.to_dict() for l in listings[:5]] == [l.to_dict() for l in generate_listings(n=333, seed=0)[:5]]


def test_bundled_flagship_is_reproducible():
    table, meta = read_dataset(bundled_path("flagship"))
    spec = DgpSpec(**SIM_PRESETS["flagship"])
    assert meta["dgp"] == spec.to_dict()
    assert (table.n, table.p) == (333, 200) and table.has_guesses
    assert meta["data_fingerprint"] == table_fingerprint(generate(spec).table)


def test_bundled_flagship_guess_lowers_outcome_rmse():
    table, _ = read_dataset(bundled_path("flagship"))
    cfg = EstimatorConfig(**SIM_ESTIMATOR_DEFAULTS["flagship"])
    with_guess = run_dml(table, cfg, use_guesses=True)
    without = run_dml(table, cfg, use_guesses=False)
    assert with_guess.rmse_y < without.rmse_y
    assert with_guess.guess_correlations[0] == pytest.approx(0.669, abs=0.05)
    assert with_guess.guess_correlations[1] == pytest.approx(0.5, abs=0.05)


def test_bundled_transcripts_cover_mock_listings():
    ids = {l.id for l in read_listings(bundled_path("mock_listings.jsonl"))}
    files = {p.name for p in bundled_path("transcripts").glob("*.jsonl")}
    assert files == {f"{i}.{k}.jsonl" for i in ids for k in ("price", "feedback_score")}


def test_plain_table_has_no_guess_columns(tmp_path):
    t = random_table(0, n=10, p=3, guesses=False)
    write_dataset(tmp_path / "d", ObservationTable(y=t.y, d=t.d, x=t.x, ids=t.ids))
    header = (tmp_path / "d" / "table.csv").read_text().splitlines()[0]
    assert header == "id,y,d,x_0,x_1,x_2"
