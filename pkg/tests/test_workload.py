import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rlhf_gensim.errors import ConfigError, TraceFormatError, TraceValidationError
from rlhf_gensim.workload import (Prompt, StepRecord, SynthConfig, WorkloadTrace, epoch_deltas,
                                  generate_synthetic, load_trace, save_trace)


def write_csv(path, rows):
    path.write_text("step_idx,prompt_id,response_idx,actual_len\n" + "".join(f"{r}\n" for r in rows))


def test_minimal_csv(tmp_path):
    p = tmp_path / "t.csv"
    write_csv(p, ["0,a,0,10", "0,b,0,20"])
    tr = load_trace(p)
    assert len(tr.prompts) == 2 and len(tr.steps) == 1
    assert tr.responses_per_prompt == 1
    assert tr.steps[0].actual_lengths == {"a": (10,), "b": (20,)}


def test_zero_length_rejected(tmp_path):
    p = tmp_path / "t.csv"
    write_csv(p, ["0,a,0,0", "0,b,0,20"])
    with pytest.raises(TraceValidationError, match="'a'"):
        load_trace(p)


def test_non_monotone_jsonl(tmp_path):
    p = tmp_path / "t.jsonl"
    prompts = [{"id": "a", "token_ids": [1, 2], "ground_truth_len": 5}]
    lines = [{"header": True, "responses_per_prompt": 1, "prompts": prompts}]
    lines += [{"step": s, "lengths": {"a": [3]}} for s in (2, 1, 3)]
    p.write_text("".join(json.dumps(x) + "\n" for x in lines))
    with pytest.raises(TraceValidationError, match="step 1"):
        load_trace(p)


def test_format_error_carries_line(tmp_path):
    p = tmp_path / "t.csv"
    write_csv(p, ["0,a,0,10", "0,b,zero,20"])
    with pytest.raises(TraceFormatError) as exc:
        load_trace(p)
    assert exc.value.line == 3
    assert ":3:" in str(exc.value)


def test_jsonl_bad_json_line(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"header": true, "responses_per_prompt": 1, "prompts": []}\n{not json\n')
    with pytest.raises(TraceFormatError) as exc:
        load_trace(p)
    assert exc.value.line == 2


def test_wrong_response_count():
    with pytest.raises(TraceValidationError, match="expected 2 responses"):
        WorkloadTrace({"a": Prompt("a", (1,), 3)}, (StepRecord(0, ("a",), {"a": (4,)}),), 2)


def test_unknown_prompt():
    with pytest.raises(TraceValidationError, match="unknown prompt"):
        WorkloadTrace({"a": Prompt("a", (1,), 3)}, (StepRecord(0, ("b",), {"b": (4,)}),), 1)


def test_prompt_too_long():
    with pytest.raises(TraceValidationError, match="prompt_len"):
        WorkloadTrace({"a": Prompt("a", (1, 2, 3), 3)}, (), 1, max_prompt_len=2)


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_round_trip(tmp_path, fmt):
    tr = generate_synthetic(SynthConfig(num_prompts=12, num_steps=4, responses_per_prompt=3, batch_size=5), 3)
    p = tmp_path / f"t.{fmt}"
    save_trace(tr, p)
    assert load_trace(p) == tr


@given(seed=st.integers(0, 2**31 - 1), g=st.integers(1, 4), n=st.integers(1, 10))
def test_round_trip_property(tmp_path_factory, seed, g, n):
    tr = generate_synthetic(SynthConfig(num_prompts=n, num_steps=2, responses_per_prompt=g), seed)
    d = tmp_path_factory.mktemp("rt")
    for fmt in ("csv", "jsonl"):
        save_trace(tr, d / f"t.{fmt}")
        assert load_trace(d / f"t.{fmt}") == tr


def test_csv_without_sidecar(tmp_path):
    p = tmp_path / "t.csv"
    write_csv(p, ["0,a,0,10", "0,b,0,20", "1,b,0,7"])
    tr = load_trace(p)
    assert tr.prompts["a"].token_ids != tr.prompts["b"].token_ids
    assert [s.scheduled_prompts for s in tr.steps] == [("a", "b"), ("b",)]


def test_calibration_example():
    tr = generate_synthetic(SynthConfig(num_prompts=100, num_steps=10, responses_per_prompt=4,
                                        paper_calibration=True), seed=7)
    d = epoch_deltas(tr)
    assert len(d) == 100 * 9
    assert np.mean(d <= 50) >= 0.70
    assert np.mean(d <= 100) >= 0.90


@given(seed=st.integers(0, 10_000))
def test_calibration_property(seed):
    tr = generate_synthetic(SynthConfig(num_prompts=100, num_steps=6, responses_per_prompt=4,
                                        paper_calibration=True), seed=seed)
    d = epoch_deltas(tr)
    assert np.mean(d <= 50) >= 0.70
    assert np.mean(d <= 100) >= 0.90


def test_zero_drift_is_constant():
    tr = generate_synthetic(SynthConfig(num_prompts=20, num_steps=5, drift=0.0), seed=1)
    first = tr.steps[0].actual_lengths
    for s in tr.steps[1:]:
        assert s.actual_lengths == first


def test_deterministic(tmp_path):
    cfg = SynthConfig(num_prompts=30, num_steps=3)
    a, b = generate_synthetic(cfg, 11), generate_synthetic(cfg, 11)
    assert a == b
    save_trace(a, tmp_path / "a.jsonl")
    save_trace(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert generate_synthetic(cfg, 12) != a


def test_batches_cover_epoch():
    tr = generate_synthetic(SynthConfig(num_prompts=10, num_steps=6, batch_size=4), seed=0)
    first_epoch = [pid for s in tr.steps[:3] for pid in s.scheduled_prompts]
    assert sorted(first_epoch) == sorted(tr.prompts)
    assert [len(s.scheduled_prompts) for s in tr.steps] == [4, 4, 2, 4, 4, 2]


def test_prefix_sharing_injected():
    tr = generate_synthetic(SynthConfig(num_prompts=40, prefix_sharing=1.0, n_templates=1,
                                        shared_prefix_len=16, prompt_len_range=(20, 30)), seed=0)
    heads = {p.token_ids[:16] for p in tr.prompts.values()}
    assert len(heads) == 1


def test_infeasible_drift_rejected():
    with pytest.raises(ConfigError, match="slope_max"):
        generate_synthetic(SynthConfig(slope_max=50, max_epoch_delta=10), 0)
    with pytest.raises(ConfigError):
        generate_synthetic(SynthConfig(num_prompts=0), 0)


@given(seed=st.integers(0, 1000))
def test_lengths_in_range(seed):
    tr = generate_synthetic(SynthConfig(num_prompts=15, num_steps=2, max_response_len=300,
                                        length_median=250), seed)
    for s in tr.steps:
        for lens in s.actual_lengths.values():
            assert all(1 <= x <= 300 for x in lens)
