import numpy as np

from src.verification.oracles import (
    CheckResult,
    bench_model_config,
    brute_force_mask,
    check_pe_compaction,
    check_pe_linearity,
    check_perfect_recovery,
    check_pipeline_sequential,
    check_throughput,
)


def test_brute_force_mask_examples():
    np.testing.assert_array_equal(brute_force_mask("unidirectional", 3), np.tril(np.ones((3, 3), dtype=bool)))
    warm = brute_force_mask("unidirectional_warmup", 4, 2)
    assert warm[0].tolist() == [True, True, False, False]
    assert warm[3].tolist() == [True, True, True, True]


def test_bench_model_defaults():
    config = bench_model_config()
    assert (config.grid_height, config.grid_width, config.channels, config.head_count) == (16, 16, 64, 4)
    small = bench_model_config({"bench": {"model": {"channels": 32}}})
    assert small.channels == 32 and small.positions == 256


def test_exact_checks_pass():
    for check in (check_pe_compaction, check_pe_linearity, check_perfect_recovery):
        passed, detail = check()
        assert passed, detail


def test_throughput_shape():
    passed, detail = check_throughput()
    assert passed, detail


def test_pipeline_sequential_equivalence():
    passed, detail = check_pipeline_sequential(seed=1)
    assert passed, detail


def test_check_result_row():
    row = CheckResult("gradient", True, "ok", 0.12345).as_row()
    assert row == {"check": "gradient", "passed": True, "detail": "ok", "seconds": 0.123}
