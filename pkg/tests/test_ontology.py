import numpy as np
import pytest

from fashionke.dataio import PostRecord, RegionRecord, SynthConfig, generate_synthetic
from fashionke.errors import OntologyError
from fashionke.ontology import NA, load_ontology, validate_record


def test_default_ontology_sizes(default_space):
    assert (default_space.n_occasions, default_space.n_categories, default_space.n_attribute_types) == (10, 21, 8)


def test_every_attribute_type_has_one_na(default_space):
    for a in default_space.attribute_types:
        assert a.values.count(NA) == 1


def test_duplicate_category_rejected(tiny_space):
    doc = tiny_space.to_dict()
    doc["categories"].append({"name": "dress", "body_zone": "full"})
    with pytest.raises(OntologyError):
        load_ontology(doc)


def test_missing_body_zone_rejected(tiny_space):
    doc = tiny_space.to_dict()
    del doc["categories"][0]["body_zone"]
    with pytest.raises(OntologyError):
        load_ontology(doc)


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(occasions=[]),
    lambda d: d["attribute_types"][0]["values"].remove(NA),
    lambda d: d["categories"][0].update(body_zone="head"),
    lambda d: d.pop("attribute_types"),
])
def test_invalid_documents(tiny_space, mutate):
    doc = tiny_space.to_dict()
    mutate(doc)
    with pytest.raises(OntologyError):
        load_ontology(doc)


def test_invalid_yaml_text():
    with pytest.raises(OntologyError):
        load_ontology("occasions: [a\n  - b")


def test_serialize_round_trip(default_space, tmp_path):
    again = load_ontology(default_space.serialize())
    assert again == default_space and again.fingerprint == default_space.fingerprint
    p = tmp_path / "o.yaml"
    p.write_text(default_space.serialize())
    assert load_ontology(p) == default_space
    assert load_ontology(str(p)) == default_space


def test_index_lookups_are_bijections(default_space):
    for i, name in enumerate(default_space.occasions):
        assert default_space.occasion_index(name) == i
    for i, c in enumerate(default_space.categories):
        assert default_space.category_index(c.name) == i
    for k, a in enumerate(default_space.attribute_types):
        assert default_space.attribute_type_index(a.name) == k
        for v, val in enumerate(a.values):
            assert default_space.value_index(k, val) == v


def test_body_zones_are_data(tiny_space):
    doc = tiny_space.to_dict()
    doc["categories"][0]["body_zone"] = "full"
    assert load_ontology(doc).body_zone(0) == "full"
    assert tiny_space.body_zone(0) == "upper"


def _record(space, occasion=0, attrs=None):
    K = space.n_attribute_types
    reg = RegionRecord((0, 0, 0.1, 0.1), np.zeros(4), 0, attrs if attrs is not None else [0] * K)
    return PostRecord("p", np.zeros(4), [], [reg], occasion)


def test_validate_record_violations(tiny_space):
    assert validate_record(_record(tiny_space), tiny_space) == []
    assert "occasion out of range" in validate_record(_record(tiny_space, tiny_space.n_occasions), tiny_space)
    problems = validate_record(_record(tiny_space, attrs=[0] * (tiny_space.n_attribute_types - 1)), tiny_space)
    assert any("attribute arity" in p for p in problems)
    problems = validate_record(_record(tiny_space, attrs=[99] * tiny_space.n_attribute_types), tiny_space)
    assert any("out of range" in p for p in problems)


def test_generated_records_validate(default_space):
    data, _ = generate_synthetic(SynthConfig(n_posts=1000, d=24, max_regions=4), default_space)
    assert len(data) == 1000
    assert all(validate_record(r, default_space) == [] for r in data)
