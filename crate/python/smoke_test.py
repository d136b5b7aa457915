"""Smoke test for the growthmix Python bindings.

Build and install first:
    pip install maturin
    pip install --no-build-isolation ./crates/python
"""

import math
import os
import tempfile

import growthmix_py as gm


def main():
    grid = gm.condition_grid()
    assert len(grid) == 108

    data, truth, cond = gm.simulate_condition(1, seed=11)
    assert len(data) == 500 and cond["scenario"] == 1
    assert data.covariate_names == ["xg1", "xg2", "xe1", "xe2"]

    with tempfile.TemporaryDirectory() as d:
        o, c = os.path.join(d, "y.csv"), os.path.join(d, "x.csv")
        data.to_csv(o, c)
        back = gm.Dataset.from_csv(o, c)
        assert back.ids == data.ids and back.column("xe1") == data.column("xe1")

    model = gm.fit_model(
        data, kind="full", classes=2, gating=["xg1", "xg2"], expert=["xe1", "xe2"],
        optimizer="direct_quasi_newton", seed=3,
    )
    assert model.converged, model.status
    crit = model.criteria()
    assert math.isclose(crit["neg2ll"], -2 * model.log_likelihood)
    knots = sorted(v for k, v in model.params() if k.endswith("knot"))
    assert abs(knots[0] - 4.0) < 0.3 and abs(knots[1] - 5.0) < 0.3, knots
    table = model.estimates("reparameterized")
    assert all(row["se"] is not None for row in table if row["free"])

    acc = gm.accuracy(model.modal_classes(), truth)
    assert 0.75 < acc <= 1.0, acc
    assert 0.0 <= model.entropy() <= 1.0
    assert abs(gm.kappa([1] * 45 + [2] * 5 + [1] * 5 + [2] * 45,
                        [1] * 50 + [2] * 50)["kappa"] - 0.8) < 1e-12
    assert abs(gm.entropy([[1.0, 0.0], [0.0, 1.0]]) - 1.0) < 1e-12

    classes = gm.fit_model(data, kind="gp", classes=2, expert=["xe1", "xe2"],
                           optimizer="direct_quasi_newton")
    three = gm.three_step(data, classes, ["xg1", "xg2"])
    two = gm.two_step(data, classes, ["xg1", "xg2"], optimizer="direct_quasi_newton")
    assert {c["term"] for c in three["coefficients"]} == {"intercept", "xg1", "xg2"}
    assert two["converged"]

    screen, _ = gm.simulate_scenario(3, seed=5)
    report = gm.variable_importance(screen, screen.covariate_names, trees=4, seed=1)
    assert len(report["rows"]) == 6
    assert all(r["score"] >= 0 for r in report["rows"])

    print(f"ok: accuracy {acc:.3f}, knots {knots[0]:.2f}/{knots[1]:.2f}, "
          f"top covariate {report['rows'][0]['covariate']}")


if __name__ == "__main__":
    main()
