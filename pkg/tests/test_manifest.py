import json

import pytest
from hypothesis import given, strategies as st

from geosift.manifest import (
    FunctionClass,
    ImageRecord,
    Stage,
    Thresholds,
    ValidationError,
    normalize_bearing,
    read_manifest,
    write_manifest,
)


def test_empty_file_reads_empty(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert read_manifest(str(path)) == []


def test_three_records_round_trip_in_order(tmp_path):
    records = [
        ImageRecord(image_id=f"i{k}", lat=float(k), lon=float(k) * 2)
        for k in range(3)
    ]
    path = tmp_path / "m.jsonl"
    write_manifest(records, str(path))
    back = read_manifest(str(path))
    assert [r.image_id for r in back] == ["i0", "i1", "i2"]
    assert back == records


def test_out_of_range_lat_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"image_id": "x", "lat": 91.0, "lon": 0.0}) + "\n")
    with pytest.raises(ValidationError, match=":1:"):
        read_manifest(str(path))


def test_malformed_line_names_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps({"image_id": "x", "lat": 0.0, "lon": 0.0})
    path.write_text(good + "\n{not json\n")
    with pytest.raises(ValidationError, match=":2:"):
        read_manifest(str(path))


def test_full_record_round_trip(tmp_path):
    record = ImageRecord(
        image_id="a", lat=48.1, lon=11.5, bearing=270.0,
        p_sim=0.8, p_score=0.9, p_size=0.4, p_dist=12.5,
        building_id="b7", weak_label=FunctionClass.COMMERCIAL,
        stage_reached=Stage.LABELED,
        extra={"source": "batch-7"},
    )
    path = tmp_path / "one.jsonl"
    write_manifest([record], str(path))
    assert path.read_text().count("\n") == 1
    assert read_manifest(str(path)) == [record]


def test_unknown_fields_preserved(tmp_path):
    raw = {"image_id": "a", "lat": 1.0, "lon": 2.0, "custom": {"k": [1, 2]}}
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(raw) + "\n")
    (record,) = read_manifest(str(path))
    assert record.extra == {"custom": {"k": [1, 2]}}
    out = tmp_path / "o.jsonl"
    write_manifest([record], str(out))
    assert json.loads(out.read_text())["custom"] == {"k": [1, 2]}


def test_bearing_360_normalizes_to_zero():
    record = ImageRecord(image_id="a", lat=0.0, lon=0.0, bearing=360.0)
    assert record.bearing == 0.0
    assert normalize_bearing(725.0) == pytest.approx(5.0)


def test_stage_ordering_matches_pipeline():
    order = [
        Stage.SIMILARITY, Stage.DETECTION, Stage.UNIQUE_LOCATION,
        Stage.DIRECTION, Stage.SIGHTLINE, Stage.LABELED,
    ]
    assert order == sorted(order)
    assert Stage.INGESTED < Stage.SIMILARITY


def test_thresholds_defaults_and_bounds():
    t = Thresholds()
    assert (t.t_sim, t.t_score, t.t_size, t.t_dist) == (0.70, 0.3, 0.2, 250.0)
    with pytest.raises(ValidationError):
        Thresholds(t_sim=1.5)
    with pytest.raises(ValidationError):
        Thresholds(t_dist=0.0)


_records = st.lists(
    st.builds(
        ImageRecord,
        image_id=st.text(
            st.characters(blacklist_categories=("Cs",), blacklist_characters="\n"),
            min_size=1, max_size=12,
        ),
        lat=st.floats(min_value=-90, max_value=90, allow_nan=False),
        lon=st.floats(min_value=-180, max_value=180, allow_nan=False),
        bearing=st.none() | st.floats(min_value=0, max_value=359.99, allow_nan=False),
        p_sim=st.none() | st.floats(min_value=-1, max_value=1, allow_nan=False),
        p_dist=st.none() | st.floats(min_value=0, max_value=1e4, allow_nan=False),
        weak_label=st.none() | st.sampled_from(list(FunctionClass)),
        stage_reached=st.sampled_from(list(Stage)),
    ),
    max_size=30,
)


@given(records=_records)
def test_round_trip_property(records, tmp_path_factory):
    path = tmp_path_factory.mktemp("rt") / "m.jsonl"
    write_manifest(records, str(path))
    assert read_manifest(str(path)) == records


def test_ten_thousand_record_round_trip(tmp_path):
    records = [
        ImageRecord(image_id=f"r{k}", lat=(k % 180) - 90.0, lon=(k % 360) - 180.0)
        for k in range(10_000)
    ]
    path = tmp_path / "big.jsonl"
    write_manifest(records, str(path))
    assert path.read_text().count("\n") == 10_000
    assert read_manifest(str(path)) == records
