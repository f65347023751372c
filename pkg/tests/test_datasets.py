"""
数据集模块测试：读写、合成基准、分层划分、扰动与 Left-Out 类别
"""
import json
import sys
from pathlib import Path

import numpy as np
import pytest

# 添加src目录到路径
sys.path.append(str(Path(__file__).parent.parent / "src"))

from datasets import (
    Dataset,
    EdgeAttack,
    FeatureNoise,
    SplitSpec,
    left_out_class_setup,
    load_dataset,
    make_synthetic_benchmark,
    perturb_features,
    perturb_graph,
    save_dataset,
    stratified_split,
)
from errors import DatasetLoadError, InputError, ParameterError, ShapeError, SplitError
from graphcore import SparseGraph, homophily


@pytest.fixture
def small():
    return make_synthetic_benchmark(nodes_per_class=25, num_classes=4, feature_dim=6, seed=3)


class TestDataset:
    """数据集校验"""

    def test_shape_mismatch(self):
        """特征行数与节点数不符抛出 ShapeError"""
        graph = SparseGraph.from_edge_list(3, [])
        with pytest.raises(ShapeError):
            Dataset(graph, np.zeros((2, 2)), np.array([0, 1, 0]), 2)

    def test_label_out_of_range(self):
        """标签越界抛出 InputError"""
        graph = SparseGraph.from_edge_list(2, [])
        with pytest.raises(InputError):
            Dataset(graph, np.zeros((2, 1)), np.array([0, 2]), 2)

    def test_missing_class(self):
        """某个类别没有节点抛出 InputError"""
        graph = SparseGraph.from_edge_list(2, [])
        with pytest.raises(InputError):
            Dataset(graph, np.zeros((2, 1)), np.array([0, 0]), 2)

    def test_class_counts(self, small):
        """每类节点数"""
        np.testing.assert_array_equal(small.class_counts(), [25, 25, 25, 25])
        assert small.num_nodes == 100
        assert small.num_features == 6


class TestDatasetFiles:
    """数据集目录读写"""

    def test_round_trip(self, small, tmp_path):
        """写出后读回内容一致"""
        save_dataset(small, tmp_path / "data")
        loaded = load_dataset(tmp_path / "data")
        np.testing.assert_array_equal(loaded.features, small.features)
        np.testing.assert_array_equal(loaded.labels, small.labels)
        np.testing.assert_array_equal(loaded.graph.edges(), small.graph.edges())
        assert loaded.num_classes == 4
        assert loaded.name == small.name

    def test_truncated_features(self, small, tmp_path):
        """特征文件长度不符时报告 features.bin"""
        directory = save_dataset(small, tmp_path / "data")
        path = directory / "features.bin"
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DatasetLoadError) as info:
            load_dataset(directory)
        assert info.value.field == "features.bin"

    def test_missing_labels(self, small, tmp_path):
        """缺少标签文件时报告 labels.bin"""
        directory = save_dataset(small, tmp_path / "data")
        (directory / "labels.bin").unlink()
        with pytest.raises(DatasetLoadError) as info:
            load_dataset(directory)
        assert info.value.field == "labels.bin"

    def test_bad_meta_field(self, small, tmp_path):
        """meta.json 字段非法时报告字段名"""
        directory = save_dataset(small, tmp_path / "data")
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
        meta["num_nodes"] = "many"
        (directory / "meta.json").write_text(json.dumps(meta), encoding="utf-8")
        with pytest.raises(DatasetLoadError) as info:
            load_dataset(directory)
        assert info.value.field == "num_nodes"

    def test_edge_out_of_range(self, small, tmp_path):
        """边索引越界时报告 edges.txt"""
        directory = save_dataset(small, tmp_path / "data")
        with open(directory / "edges.txt", "a", encoding="utf-8") as f:
            f.write("0 1000\n")
        with pytest.raises(DatasetLoadError) as info:
            load_dataset(directory)
        assert info.value.field == "edges.txt"


class TestSyntheticBenchmark:
    """合成基准"""

    def test_full_homophily(self):
        """homophily = 1 时没有类间边"""
        data = make_synthetic_benchmark(nodes_per_class=30, num_classes=3, feature_dim=3, homophily=1.0, seed=0)
        edges = data.graph.edges()
        assert np.all(data.labels[edges[:, 0]] == data.labels[edges[:, 1]])
        assert homophily(data.graph, data.labels) == 1.0

    def test_deterministic(self):
        """同一种子生成相同数据"""
        a = make_synthetic_benchmark(nodes_per_class=20, num_classes=2, feature_dim=2, seed=5)
        b = make_synthetic_benchmark(nodes_per_class=20, num_classes=2, feature_dim=2, seed=5)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.graph.edges(), b.graph.edges())

    def test_separated_classes(self):
        """类均值分隔 4σ 时按最近均值分类几乎全对"""
        data = make_synthetic_benchmark(nodes_per_class=500, num_classes=2, feature_dim=2, seed=0)
        preds = np.argmax(data.features, axis=1)
        assert np.mean(preds == data.labels) >= 0.99

    def test_feature_scale(self):
        """特征噪声标准差为 σ，类均值沿坐标轴为 separation·σ"""
        data = make_synthetic_benchmark(nodes_per_class=2000, num_classes=2, feature_dim=4, seed=1,
                                        separation=4.0, noise_scale=0.05)
        class_zero = data.features[data.labels == 0]
        np.testing.assert_allclose(class_zero.mean(axis=0), [0.2, 0.0, 0.0, 0.0], atol=0.01)
        np.testing.assert_allclose(class_zero.std(axis=0), 0.05, rtol=0.1)

    def test_invalid_parameters(self):
        """特征维度小于类别数、homophily 越界或噪声尺度非正抛出 ParameterError"""
        with pytest.raises(ParameterError):
            make_synthetic_benchmark(num_classes=5, feature_dim=3)
        with pytest.raises(ParameterError):
            make_synthetic_benchmark(homophily=1.5)
        with pytest.raises(ParameterError):
            make_synthetic_benchmark(noise_scale=0.0)


class TestStratifiedSplit:
    """分层划分"""

    def test_sizes(self, small):
        """100 个节点按 5/15/80 划分"""
        split = stratified_split(small, (0.05, 0.15, 0.80), seed=0)
        assert split.sizes() == {"train": 5, "val": 15, "test": 80}

    def test_every_class_trained(self, small):
        """每个类别至少一个训练节点"""
        split = stratified_split(small, (0.01, 0.19, 0.80), seed=0)
        assert np.all(np.bincount(small.labels[split.train], minlength=4) >= 1)

    def test_disjoint_and_exhaustive(self, small):
        """三个集合不相交且覆盖全部节点"""
        split = stratified_split(small, seed=1)
        total = split.train.astype(int) + split.val.astype(int) + split.test.astype(int)
        np.testing.assert_array_equal(total, np.ones(100, dtype=int))

    def test_deterministic(self, small):
        """同一种子划分相同，不同种子不同"""
        a = stratified_split(small, seed=4)
        b = stratified_split(small, seed=4)
        c = stratified_split(small, seed=5)
        np.testing.assert_array_equal(a.train, b.train)
        assert not np.array_equal(a.train | a.val, c.train | c.val)

    def test_tiny_class(self):
        """节点少于 3 个的类别抛出 SplitError"""
        graph = SparseGraph.from_edge_list(5, [])
        data = Dataset(graph, np.zeros((5, 1)), np.array([0, 0, 0, 1, 1]), 2)
        with pytest.raises(SplitError):
            stratified_split(data)

    def test_bad_ratios(self, small):
        """比例和不为 1 抛出 SplitError"""
        with pytest.raises(SplitError):
            stratified_split(small, (0.5, 0.5, 0.5))

    def test_overlapping_masks(self):
        """重叠掩码抛出 SplitError"""
        with pytest.raises(SplitError):
            SplitSpec(np.array([True, False]), np.array([True, True]), np.array([False, False]))


class TestPerturbation:
    """特征与结构扰动"""

    def test_bernoulli_mean(self):
        """Ber(0.5) 扰动的均值接近 0.5，取值只有 0 与 1"""
        graph = SparseGraph.from_edge_list(10, [])
        data = Dataset(graph, np.full((10, 1000), 7.0), np.arange(10) % 2, 2)
        perturbed, nodes = perturb_features(data, FeatureNoise.BERNOULLI, 1.0, np.random.default_rng(0))
        assert nodes.size == 10
        values = perturbed.features
        assert set(np.unique(values)) <= {0.0, 1.0}
        assert 0.47 <= values.mean() <= 0.53

    def test_normal_noise_replaces_rows(self, small):
        """只替换被选中节点的特征，原数据集不变"""
        original = small.features.copy()
        perturbed, nodes = perturb_features(small, "normal", 0.1, np.random.default_rng(1))
        assert nodes.size == 10
        untouched = np.setdiff1d(np.arange(100), nodes)
        np.testing.assert_array_equal(perturbed.features[untouched], original[untouched])
        assert not np.allclose(perturbed.features[nodes], original[nodes])
        np.testing.assert_array_equal(small.features, original)

    def test_zero_fraction(self, small):
        """比例为 0 时不扰动"""
        perturbed, nodes = perturb_features(small, "normal", 0.0, np.random.default_rng(0))
        assert nodes.size == 0
        np.testing.assert_array_equal(perturbed.features, small.features)

    def test_candidates(self, small):
        """只从候选节点中选择"""
        pool = np.arange(50, 100)
        _, nodes = perturb_features(small, "bernoulli", 0.2, np.random.default_rng(2), candidates=pool)
        assert nodes.size == 10
        assert np.all(np.isin(nodes, pool))

    def test_invalid_fraction(self, small):
        """比例越界抛出 ParameterError"""
        with pytest.raises(ParameterError):
            perturb_features(small, "normal", 1.5, np.random.default_rng(0))

    def test_graph_perturbation_keeps_features(self, small):
        """结构扰动只换图"""
        for kind in EdgeAttack:
            perturbed = perturb_graph(small, kind, 0.2, np.random.default_rng(0))
            np.testing.assert_array_equal(perturbed.features, small.features)
            assert perturbed.graph.num_edges == small.graph.num_edges


class TestLeftOutClasses:
    """Left-Out 类别设置"""

    @pytest.fixture
    def seven(self):
        return make_synthetic_benchmark(nodes_per_class=20, num_classes=7, feature_dim=7, seed=0)

    def test_remaining_classes(self, seven):
        """留出 {4, 5, 6} 后剩 4 个类别"""
        split = stratified_split(seven, (0.2, 0.2, 0.6), seed=0)
        setup = left_out_class_setup(seven, split, [4, 5, 6])
        assert setup.dataset.num_classes == 4
        assert setup.class_map == {0: 0, 1: 1, 2: 2, 3: 3}
        assert setup.ood_nodes.size == 60
        np.testing.assert_array_equal(setup.original_labels, seven.labels)

    def test_no_leak(self, seven):
        """OOD 节点不出现在训练/验证集，全部进入测试集"""
        split = stratified_split(seven, (0.2, 0.2, 0.6), seed=0)
        setup = left_out_class_setup(seven, split, [4, 5, 6])
        assert not np.any(setup.split.train[setup.ood_nodes])
        assert not np.any(setup.split.val[setup.ood_nodes])
        assert np.all(setup.split.test[setup.ood_nodes])
        assert setup.dataset.graph is seven.graph

    def test_relabel_non_contiguous(self, seven):
        """留出中间的类别后重新编号"""
        split = stratified_split(seven, (0.2, 0.2, 0.6), seed=0)
        setup = left_out_class_setup(seven, split, [1, 3])
        assert setup.class_map == {0: 0, 2: 1, 4: 2, 5: 3, 6: 4}
        id_nodes = np.flatnonzero(~np.isin(seven.labels, [1, 3]))
        mapped = np.array([setup.class_map[c] for c in seven.labels[id_nodes]])
        np.testing.assert_array_equal(setup.dataset.labels[id_nodes], mapped)

    def test_all_left_out(self, seven):
        """不能留出全部类别"""
        split = stratified_split(seven, seed=0)
        with pytest.raises(InputError):
            left_out_class_setup(seven, split, range(7))

    def test_out_of_range(self, seven):
        """类别越界抛出 InputError"""
        split = stratified_split(seven, seed=0)
        with pytest.raises(InputError):
            left_out_class_setup(seven, split, [9])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
