import json

import numpy as np
import pytest

from exitlab.model import (ModelError, choose_neighborhood, load_model, model_from_dict, preset,
                           validate_model)
from exitlab.flow import conjugation


def test_linear_model_is_valid():
    m = validate_model("x", "1", -1, 1)
    assert m.lambda_ == pytest.approx(1.0, rel=1e-12)
    assert m.eta_bound <= 1e-12
    assert m.is_linear


def test_cubic_model_is_valid():
    m = validate_model("x + x^3", "1", -0.7, 0.7)
    assert m.lambda_ == pytest.approx(1.0, rel=1e-9)
    assert m.eta_bound == pytest.approx(0.7, rel=1e-3)  # eta(x) = x on the grid


def test_second_zero_is_reported():
    with pytest.raises(ModelError, match="second zero") as info:
        validate_model("x*(1-x)", "1", -0.5, 1.5)
    assert any("1" in p for p in info.value.problems)


def test_all_problems_are_collected():
    with pytest.raises(ModelError) as info:
        validate_model("x - 1", "-1", -2, 2)
    text = " ".join(info.value.problems)
    assert "b(0)" in text and "sigma(0)" in text
    assert len(info.value.problems) >= 2


def test_attracting_zero_rejected():
    with pytest.raises(ModelError, match="positive"):
        validate_model("-x", "1", -1, 1)


def test_supplied_lambda_must_match():
    assert validate_model("2*x", "1", -1, 1, lambda_=2.0).lambda_ == 2.0
    with pytest.raises(ModelError, match="disagrees"):
        validate_model("2*x", "1", -1, 1, lambda_=2.1)


def test_interval_must_contain_zero():
    with pytest.raises(ModelError):
        validate_model("x", "1", 0.1, 1)


def test_presets_match_their_definitions():
    assert preset("linear-asym").q_minus == -0.5
    assert preset("cubic").b.text == "x + x^3"
    assert preset("varsigma").sigma(0.0) == 1.0


def test_load_model_from_file_and_errors(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"b": "x", "sigma": "1", "q_minus": -1, "q_plus": 2}))
    assert load_model(path).q_plus == 2.0
    assert load_model("cubic") == preset("cubic")
    missing = tmp_path / "nope.json"
    with pytest.raises(FileNotFoundError, match="nope.json"):
        load_model(missing)
    with pytest.raises(ModelError, match="unknown"):
        model_from_dict({"b": "x", "sigma": "1", "q_minus": -1, "q_plus": 1, "c": 0})


def test_content_hash_is_stable():
    assert preset("cubic").content_hash == preset("cubic").content_hash
    assert preset("cubic").content_hash != preset("linear-ou").content_hash


def test_default_neighborhood_linear(linear):
    nb = choose_neighborhood(linear)
    assert nb.R == 0.5
    assert (nb.v_minus, nb.v_plus) == (-0.5, 0.5)


def test_neighborhood_too_large(linear):
    with pytest.raises(ModelError, match="too large"):
        choose_neighborhood(linear, 2.0)


def test_cubic_neighborhood_closed_form(cubic):
    # f(x) = x / sqrt(1 + x^2), so g(y) = y / sqrt(1 - y^2)
    nb = choose_neighborhood(cubic, 0.3)
    exact = 0.3 / np.sqrt(1 - 0.09)
    assert nb.v_plus == pytest.approx(exact, abs=1e-8)
    assert nb.v_minus == pytest.approx(-exact, abs=1e-8)
    assert conjugation(cubic, nb.v_plus) == pytest.approx(0.3, abs=1e-9)
    assert cubic.q_minus < nb.v_minus < nb.v_plus < cubic.q_plus
