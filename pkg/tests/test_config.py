from __future__ import annotations

import json
from pathlib import Path

import pytest

from dermpipe.config import PipelineConfig, load_config
from dermpipe.errors import ConfigError
from dermpipe.reranker import RankStrategy
from dermpipe.retrieval import RetrievalStrategy

from .conftest import DATA


def test_demo_config_loads_relative_paths():
    cfg = load_config(DATA / "demo" / "config.toml")
    assert cfg.dataset_path == (DATA / "demo" / "dataset.jsonl").resolve()
    assert cfg.rerank_strategy is RankStrategy.MAC
    assert cfg.seed == 7 and cfg.gateway.seed == 7
    cfg.check_paths("dataset_path", "script_path")


def test_json_config_and_nested_tables(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(
        json.dumps(
            {
                "retrieval_strategy": "expert_cot",
                "gateway": {"temperature": 0.2, "seed": 3},
                "mac": {"max_revision_rounds": 1, "specialist_names": ["A", "B", "C"]},
                "apo": {"max_iterations": 2},
                "seed": 9,
            }
        )
    )
    cfg = load_config(path)
    assert cfg.retrieval_strategy is RetrievalStrategy.EXPERT_COT
    assert cfg.gateway.seed == 3  # an explicit gateway seed wins
    assert cfg.mac.specialist_names == ("A", "B", "C")
    assert cfg.apo.max_iterations == 2


@pytest.mark.parametrize(
    "body",
    [
        '{"bogus": 1}',
        '{"rerank_strategy": "random"}',
        '{"gateway": 5}',
        '{"gateway": {"temperature": 9}}',
        '{"max_concurrency": 0}',
        '{"judge_mode": "vibes"}',
        "[1]",
        "{not json",
    ],
)
def test_bad_configs(tmp_path, body):
    path = tmp_path / "c.json"
    path.write_text(body)
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_overrides_take_precedence():
    cfg = PipelineConfig(seed=1).with_overrides(seed=5, out_dir=Path("x"), dataset_path=None)
    assert cfg.seed == 5 and cfg.gateway.seed == 5 and cfg.out_dir == Path("x") and cfg.dataset_path is None


def test_check_paths(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig().check_paths("dataset_path")
    with pytest.raises(ConfigError):
        PipelineConfig(dataset_path=tmp_path / "missing").check_paths("dataset_path")
    with pytest.raises(ConfigError):
        PipelineConfig(prompts_dir=tmp_path / "missing").check_paths()


def test_to_dict_round_trips():
    cfg = load_config(DATA / "demo" / "config.toml")
    again = PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
