"""
命令行入口测试
"""
import json
import sys
from pathlib import Path

import pandas as pd
import pytest

# 添加项目根目录与src目录到路径
sys.path.append(str(Path(__file__).parent.parent))
sys.path.append(str(Path(__file__).parent.parent / "src"))

from main import main

TINY_CONFIG = """
nodes_per_class=10
num_classes=2
feature_dim=3
hidden_dim=8
latent_dim=2
n_radial=1
dropout=0.0
warmup_epochs=1
max_epochs=3
num_workers=1
"""


@pytest.fixture
def workspace(tmp_path):
    config = tmp_path / "tiny.conf"
    config.write_text(TINY_CONFIG, encoding="utf-8")
    data = tmp_path / "data"
    assert main(["synth", "--config", str(config), "--out", str(data)]) == 0
    return tmp_path, config, data


class TestCli:
    """子命令与退出码"""

    def test_synth_writes_dataset(self, workspace):
        """synth 写出可读取的数据集目录"""
        _, _, data = workspace
        meta = json.loads((data / "meta.json").read_text(encoding="utf-8"))
        assert meta["num_nodes"] == 20
        assert (data / "edges.txt").is_file()

    def test_train_then_eval(self, workspace):
        """train 写出历史、检查点与结果，eval 可以读回检查点"""
        root, config, data = workspace
        out = root / "train"
        assert main(["train", "--data", str(data), "--config", str(config), "--out", str(out)]) == 0
        history = pd.read_csv(out / "history.csv")
        assert list(history["phase"]) == ["warmup", "train", "train", "train"]
        assert (out / "model.ckpt").is_file()
        records = json.loads((out / "results.json").read_text(encoding="utf-8"))
        assert records[0]["name"] == "train"
        assert "accuracy" in pd.read_csv(out / "results.csv").columns

        eval_out = root / "eval"
        code = main(["eval", "--data", str(data), "--config", str(config),
                     "--checkpoint", str(out / "model.ckpt"), "--out", str(eval_out)])
        assert code == 0
        assert (eval_out / "results.json").is_file()

    def test_eval_uses_checkpoint_propagation(self, workspace):
        """eval 按检查点里的传播设置重建算子，不受当前配置影响"""
        root, config, data = workspace
        trained_config = root / "row.conf"
        trained_config.write_text(TINY_CONFIG + "propagation_mode=row\nteleport=0.3\niterations=3\n", encoding="utf-8")
        out = root / "train_row"
        assert main(["train", "--data", str(data), "--config", str(trained_config), "--out", str(out)]) == 0
        trained = json.loads((out / "results.json").read_text(encoding="utf-8"))[0]

        eval_out = root / "eval_row"
        assert main(["eval", "--data", str(data), "--config", str(config),
                     "--checkpoint", str(out / "model.ckpt"), "--out", str(eval_out)]) == 0
        evaluated = json.loads((eval_out / "results.json").read_text(encoding="utf-8"))[0]
        model_config = evaluated["config"]["model"]
        assert (model_config["propagation_mode"], model_config["teleport"], model_config["iterations"]) == ("row", 0.3, 3)
        for name in ("accuracy", "ece", "brier"):
            assert evaluated["metrics"][name] == pytest.approx(trained["metrics"][name], rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("method", ["gkde", "lp"])
    def test_baseline(self, workspace, method):
        """baseline 子命令"""
        root, config, data = workspace
        out = root / method
        assert main(["baseline", "--data", str(data), "--config", str(config), "--method", method,
                     "--out", str(out)]) == 0
        assert pd.read_csv(out / "results.csv")["name"].tolist() == [method]

    def test_ood(self, workspace):
        """ood 子命令"""
        root, config, data = workspace
        out = root / "ood"
        code = main(["ood", "--data", str(data), "--config", str(config), "--kind", "feature_normal",
                     "--fraction", "0.5", "--out", str(out)])
        assert code == 0
        records = json.loads((out / "results.json").read_text(encoding="utf-8"))
        assert records[0]["name"] == "feature_normal"

    def test_shift(self, workspace):
        """shift 子命令每个强度一条记录"""
        root, config, data = workspace
        out = root / "shift"
        code = main(["shift", "--data", str(data), "--config", str(config), "--kind", "edges_random",
                     "--levels", "0", "0.5", "--out", str(out)])
        assert code == 0
        assert len(pd.read_csv(out / "results.csv")) == 2

    def test_bad_dataset_exit_code(self, tmp_path):
        """数据集目录不存在时返回非零退出码"""
        assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1

    def test_eval_without_checkpoint(self, workspace):
        """eval 缺少检查点时返回非零退出码"""
        root, config, data = workspace
        assert main(["eval", "--data", str(data), "--config", str(config), "--out", str(root / "e")]) == 1

    def test_bad_config_exit_code(self, tmp_path):
        """配置非法时返回非零退出码"""
        config = tmp_path / "bad.conf"
        config.write_text("hidden_dim=abc\n", encoding="utf-8")
        assert main(["synth", "--config", str(config), "--out", str(tmp_path / "d")]) == 1

    def test_invalid_model_setting_exit_code(self, workspace):
        """模型超参数越界时返回非零退出码"""
        root, config, data = workspace
        bad = root / "bad.conf"
        bad.write_text(config.read_text(encoding="utf-8") + "teleport=2.0\n", encoding="utf-8")
        assert main(["train", "--data", str(data), "--config", str(bad), "--out", str(root / "t")]) == 1


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
