import numpy as np

from results import AttackResult, IterationRecord, summary_frame, telemetry_frame


def _result(**kwargs):
    perturbation = np.zeros((4, 4, 3))
    perturbation[1, 2] = [0.0, 0.02, 0.0]
    perturbation[3, 3] = [0.01, 0.01, 0.01]
    defaults = dict(method="sca", adversarial=np.full((4, 4, 3), 0.5), perturbation=perturbation,
                    success=True, outer_iterations=2, inner_iterations=5, p_l0=2 / 16, p_l2=0.003,
                    linf=0.02, elapsed_s=1.25,
                    telemetry=[IterationRecord(outer=1, remaining_pixels=3, inner_steps=4, target_category=1,
                                               target_score=2.5, target_score_after=1.0),
                               IterationRecord(outer=2, remaining_pixels=0, inner_steps=1)])
    defaults.update(kwargs)
    return AttackResult(**defaults)


def test_l0_counts_spatial_pixels():
    assert _result().l0_pixels == 2


def test_record_omits_timing_by_default():
    record = _result().to_record()
    assert "elapsed_s" not in record
    assert record["l0_pixels"] == 2
    assert record["telemetry"][1] == {"outer": 2, "remaining_pixels": 0, "inner_steps": 1, "degenerate": False}
    assert _result().to_record(include_timing=True)["elapsed_s"] == 1.25


def test_from_record_restores_the_result():
    original = _result(budget={"max_inner_sca": 20, "max_outer_sca": 50}, t_attack=0.1)
    restored = AttackResult.from_record(original.to_record(include_timing=True), original.adversarial,
                                        original.perturbation)
    assert restored.telemetry == original.telemetry
    assert restored.budget == original.budget
    assert restored.elapsed_s == 1.25
    assert restored.to_record() == original.to_record()


def test_summary_frame_is_sorted_by_index():
    records = [{**_result().to_record(), "index": 1}, {**_result(method="dca").to_record(), "index": 0}]
    frame = summary_frame(records)
    assert list(frame["index"]) == [0, 1]
    assert list(frame["method"]) == ["dca", "sca"]


def test_empty_frames_keep_their_columns():
    assert "p_l0" in summary_frame([]).columns
    assert list(telemetry_frame([]).columns) == ["index", "method", "outer", "remaining_pixels"]


def test_telemetry_frame_has_one_row_per_iteration():
    records = [{**_result().to_record(), "index": 0}, {**_result().to_record(), "index": 1}]
    frame = telemetry_frame(records)
    assert len(frame) == 4
    assert list(frame["outer"]) == [1, 2, 1, 2]
    assert frame.loc[0, "target_score_after"] == 1.0
