"""Benchmark harness and the ablation runner at a toy scale."""

import io

import numpy as np
import pytest

from sparseseg.bench import (
    REFERENCE_DICE,
    REFERENCE_WHOLE_VOLUME_CPU_SECONDS,
    bench_segment,
    run_ablation,
)
from sparseseg.model import ModelConfig, ResidualTransformer
from sparseseg.phantom import PhantomConfig, generate_phantom
from sparseseg.trainer import TrainConfig


@pytest.fixture(scope="module")
def model():
    return ResidualTransformer(ModelConfig(seed=55))


class TestBenchSegment:
    def test_report_fields(self, model, tiny_phantom):
        v, _ = tiny_phantom
        report = bench_segment(model, v, runs=5)
        assert report.queries == 64
        assert report.runs == 5
        assert report.whole_volume_seconds > 0
        assert report.queries_per_sec > 0
        assert report.dims == (24, 24, 24)
        # phases are measured independently but live within the total
        assert report.gather_seconds + report.forward_seconds \
            <= report.whole_volume_seconds * 1.2

    def test_reference_values_reported_not_asserted(self, model, tiny_phantom):
        v, _ = tiny_phantom
        report = bench_segment(model, v, runs=5)
        assert report.reference_cpu_seconds == REFERENCE_WHOLE_VOLUME_CPU_SECONDS
        table = report.format_table()
        assert "2.24" in table and "context only" in table
        assert "total" in table

    def test_minimum_run_count_enforced(self, model, tiny_phantom):
        v, _ = tiny_phantom
        report = bench_segment(model, v, runs=1)
        assert report.runs == 5


@pytest.fixture(scope="module")
def report():
    train_set = [generate_phantom(PhantomConfig(dims=(24, 24, 24), seed=s))
                 for s in (61, 62)]
    test_set = [generate_phantom(PhantomConfig(dims=(24, 24, 24), seed=63))]
    budget = TrainConfig(samples_per_image=100, balanced_fraction=0.1,
                         batch_size=16, max_steps=8, eval_every=8, seed=2)
    return run_ablation(
        train_set, test_set, ("full", "mlp_only"),
        ModelConfig(seed=3), budget, log_sink=io.StringIO(),
    )


class TestAblation:

    def test_row_per_variant(self, report):
        assert [r.variant for r in report.rows] == ["full", "mlp_only"]

    def test_scores_in_range(self, report):
        for r in report.rows:
            assert 0.0 <= r.descriptor_dice <= 1.0
            assert 0.0 <= r.whole_volume_dice <= 1.0
            assert all(0.0 <= v <= 1.0 for v in r.per_class_whole_volume.values())

    def test_shared_config_hash(self, report):
        assert len(report.shared_config_hash) == 16
        assert report.reference_dice == REFERENCE_DICE

    def test_format_table_lists_variants(self, report):
        table = report.format_table()
        assert "full" in table and "mlp_only" in table
        assert report.shared_config_hash in table

    def test_requires_two_variants(self):
        with pytest.raises(ValueError, match="2 variants"):
            run_ablation([], [], ("full",), ModelConfig(), TrainConfig())

    def test_budget_not_mutated(self):
        train_set = [generate_phantom(PhantomConfig(dims=(24, 24, 24), seed=64))]
        budget = TrainConfig(samples_per_image=100, balanced_fraction=0.1,
                             batch_size=8, max_steps=2, eval_every=2, seed=2)
        t_before = budget.adam.t
        run_ablation(train_set, train_set, ("full", "mlp_only"),
                     ModelConfig(seed=3), budget, log_sink=io.StringIO())
        assert budget.adam.t == t_before
