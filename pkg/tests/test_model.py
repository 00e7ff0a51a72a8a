import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MORTGAGE_SPACE, random_grid, random_model
from itemfit.errors import InputError, InvalidModel, InvalidStatusSpace
from itemfit.model import (
    REPORT_COLUMNS,
    Criterion,
    CurveFamily,
    CurveSpec,
    FitConfig,
    FitReport,
    ItemModel,
    ObservationGrid,
    RegressorKind,
    RegressorMeta,
    ReportEntry,
    StateCoefficients,
    StatusSpace,
    TerminalReason,
    default_reference_state,
    deserialize_model,
    infer_status_space,
    load_model,
    resolve_m0,
    save_model,
    serialize_model,
    validate_grid,
)


class TestStatusSpace:
    def test_absorbing_filled_as_self_loop(self):
        sp = StatusSpace(("C", "P"), {"C": ("C", "P")}, {"P"})
        assert sp.reachable_from("P") == ("P",)

    @pytest.mark.parametrize("kwargs", [
        dict(states=("C", "C"), reachable={}),
        dict(states=("C",), reachable={"C": ()}),
        dict(states=("C",), reachable={"C": ("X",)}),
        dict(states=("C", "P"), reachable={"P": ("C",)}, absorbing={"P"}),
        dict(states=("C",), reachable={}, absorbing={"Z"}),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidStatusSpace):
            StatusSpace(**kwargs)

    def test_reference_is_self_transition_when_reachable(self):
        assert default_reference_state(MORTGAGE_SPACE, "C") == "C"
        sp = StatusSpace(("A", "B", "C"), {"A": ("B", "C")})
        assert default_reference_state(sp, "A") == "B"

    def test_dict_round_trip(self):
        assert StatusSpace.from_dict(MORTGAGE_SPACE.to_dict()) == MORTGAGE_SPACE


class TestItemModel:
    def test_empty_model_parameters(self):
        meta = [RegressorMeta("f", RegressorKind.FLAG), RegressorMeta("x")]
        m = ItemModel.empty(MORTGAGE_SPACE, "C", meta)
        assert m.free_states == ("P", "3") and m.reference_index == 0
        assert m.n_parameters() == 2 * 2
        m = m.with_curves([CurveSpec("LOGISTIC", 1, 0, 1, "P", 1)])
        assert m.n_parameters() == 4 + 3 and m.n_parameters(4) == 4 + 4

    def test_curve_on_reference_rejected(self):
        m = ItemModel.empty(MORTGAGE_SPACE, "C", [RegressorMeta("x")])
        with pytest.raises(InvalidModel):
            m.with_curves([CurveSpec("LOGISTIC", 1, 0, 0, "C", 1)])

    def test_missing_coefficients_rejected(self):
        with pytest.raises(InvalidModel):
            ItemModel(MORTGAGE_SPACE, "C", "C", (), {"P": StateCoefficients(0.0, ())})

    def test_curve_invariants(self):
        with pytest.raises(InvalidModel):
            CurveSpec("GAUSSIAN", 0.0, 0.0, 0, "P", 1.0)
        with pytest.raises(InvalidModel):
            CurveSpec("LOGISTIC", float("inf"), 0.0, 0, "P", 1.0)

    def test_only_real_columns_take_curves(self):
        with pytest.raises(InputError):
            RegressorMeta("f", RegressorKind.FLAG, curve_eligible=True)


class TestSerialization:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip_field_for_field(self, seed):
        model = random_model(np.random.default_rng(seed))
        again = deserialize_model(serialize_model(model))
        assert again == model
        for c1, c2 in zip(model.curves, again.curves):
            assert (c1.a, c1.b, c1.beta) == (c2.a, c2.b, c2.beta)

    def test_field_names(self, rng):
        d = json.loads(serialize_model(random_model(rng)))
        for key in ("version", "start_status", "reference_state", "states", "reachable", "regressors",
                    "intercepts", "flag_betas", "curves"):
            assert key in d
        assert set(d["curves"][0]) == {"family", "a", "b", "regressor", "to_state", "beta"}

    def test_file_round_trip(self, rng, tmp_path):
        model = random_model(rng)
        save_model(model, tmp_path / "m.json")
        assert load_model(tmp_path / "m.json") == model
        assert (tmp_path / "m.json").read_text() == serialize_model(model)

    def test_bad_version(self, rng):
        d = json.loads(serialize_model(random_model(rng)))
        d["version"] = 99
        with pytest.raises(InvalidModel):
            deserialize_model(json.dumps(d))


class TestValidateGrid:
    def test_valid_grid(self, rng):
        model = random_model(rng)
        grid = random_grid(rng, model, 20)
        assert validate_grid(grid, MORTGAGE_SPACE) == []

    def test_row_sum_violation_names_row(self, rng):
        model = random_model(rng)
        grid = random_grid(rng, model, 10)
        y = np.array(grid.y)
        y[4] *= 0.9
        problems = validate_grid(grid.with_y(y), MORTGAGE_SPACE)
        assert len(problems) == 1 and "row 4" in problems[0]

    def test_unreachable_end_status(self):
        sp = StatusSpace(("C", "P", "3"), {"C": ("C", "P")}, {"P"})
        meta = [RegressorMeta("x")]
        grid = ObservationGrid.from_labels(meta, np.zeros((3, 1)), ["C"] * 3, ["C", "3", "P"], sp.states)
        problems = validate_grid(grid, sp)
        assert len(problems) == 1 and "row 1" in problems[0]

    def test_non_finite_and_bad_flag(self):
        meta = [RegressorMeta("f", RegressorKind.FLAG), RegressorMeta("x")]
        x = np.array([[0.0, 1.0], [2.0, 1.0], [1.0, np.nan]])
        grid = ObservationGrid.from_labels(meta, x, ["C"] * 3, ["C"] * 3, MORTGAGE_SPACE.states)
        problems = validate_grid(grid, MORTGAGE_SPACE)
        assert any("row 1" in p for p in problems) and any("row 2" in p for p in problems)

    def test_pure(self, rng):
        model = random_model(rng)
        grid = random_grid(rng, model, 10)
        y = np.array(grid.y)
        y[0] = 0.5
        bad = grid.with_y(y)
        assert validate_grid(bad, MORTGAGE_SPACE) == validate_grid(bad, MORTGAGE_SPACE)

    def test_grid_arrays_read_only(self, rng):
        grid = random_grid(rng, random_model(rng), 5)
        with pytest.raises(ValueError):
            grid.x[0, 0] = 1.0

    def test_inferred_space(self, rng):
        grid = random_grid(rng, random_model(rng), 200)
        sp = infer_status_space(grid)
        assert set(sp.reachable_from("C")) == {"C", "P", "3"}


class TestConfigAndReport:
    def test_defaults(self):
        c = FitConfig()
        assert c.criterion is Criterion.AIC and c.comparator_c == 5.0 and c.ll_cap == 20.0
        assert FitConfig(criterion="bic").criterion is Criterion.BIC
        assert FitConfig(criterion=Criterion.BIC).criterion is Criterion.BIC

    @pytest.mark.parametrize("kwargs", [dict(comparator_c=0), dict(m0=1), dict(ll_cap=0), dict(noise_sd=2e-3)])
    def test_invalid(self, kwargs):
        with pytest.raises(InputError):
            FitConfig(**kwargs)

    def test_m0_default(self):
        assert resolve_m0(10**6) == 10**4
        assert resolve_m0(10**8) == 10**4
        assert resolve_m0(20_000) == 200
        assert resolve_m0(50) == 2

    def test_report_csv_round_trip(self, tmp_path):
        r = FitReport([ReportEntry("age", "P", CurveFamily.LOGISTIC, 0.1, 2.5, 0.45, -10.0, -5.0),
                       ReportEntry("inc", "3", CurveFamily.GAUSSIAN, -1.0, 0.3, 0.44, -3.0, 1.0)],
                      TerminalReason.CRITERION_FAILED)
        r.write_csv(tmp_path / "r.csv")
        text = (tmp_path / "r.csv").read_text()
        assert text.splitlines()[0] == ",".join(REPORT_COLUMNS)
        assert text.splitlines()[1].startswith("age,P,logistic,")
        assert FitReport.read_csv(tmp_path / "r.csv").entries == r.entries
