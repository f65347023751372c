"""
张量与自动微分模块测试
"""
import sys
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp
from scipy import special as sp_special

# 添加src目录到路径
sys.path.append(str(Path(__file__).parent.parent / "src"))

from diffcore import (
    Tape,
    Tensor,
    add_bias,
    backward,
    current_tape,
    digamma,
    dropout,
    exp,
    lgamma,
    log,
    logsumexp,
    matmul,
    no_grad,
    numerical_gradient,
    relu,
    reshape,
    row_gather,
    row_norm,
    softplus,
    spmm,
    stack_columns,
    take_per_row,
    tensor_mean,
    tensor_sum,
    zero_grad,
)
from errors import ParameterError, ShapeError


def _check_grad(fn, tensor, rtol=1e-6, atol=1e-8):
    """计算带梯度与中心差分对照"""
    tensor.grad = None
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    analytic = tensor.grad.copy()
    numeric = numerical_gradient(fn, tensor)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestTensorBasics:
    """张量基本属性"""

    def test_float64_storage(self):
        """数据统一存为 float64"""
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float64
        assert t.shape == (3,)
        assert t.is_leaf

    def test_detach_stops_gradient(self):
        """detach 后不再追踪梯度"""
        x = Tensor([1.0, 2.0], requires_grad=True)
        d = x.detach()
        assert not d.requires_grad
        np.testing.assert_array_equal(d.data, x.data)

    def test_item_requires_single_element(self):
        """item 只接受单元素张量"""
        assert Tensor([3.5]).item() == 3.5
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()


class TestBackward:
    """反向传播语义"""

    def test_simple_chain(self):
        """d/dx sum(x*x + 3x) = 2x + 3"""
        x = Tensor([1.0, -2.0, 0.5], requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(x * x + 3.0 * x)
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2.0 * x.data + 3.0)

    def test_repeated_backward_accumulates(self):
        """重复反向传播梯度恰好翻倍"""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(x * x)
            tape.backward(loss)
            first = x.grad.copy()
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 2.0 * first)

    def test_zero_grad(self):
        """zero_grad 清空梯度"""
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            loss = tensor_sum(x * 2.0)
            backward(loss)
        zero_grad([x])
        assert x.grad is None

    def test_shared_input(self):
        """同一张量多次使用时梯度相加"""
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(x * x * x)
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, [12.0])

    def test_non_scalar_loss_rejected(self):
        """非标量损失抛出 ShapeError"""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = x * 2.0
            with pytest.raises(ShapeError):
                backward(y)

    def test_no_grad_records_nothing(self):
        """no_grad 中不记录运算"""
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with no_grad():
                y = x * 2.0
            assert len(tape) == 0
        assert not y.requires_grad

    def test_constants_not_recorded(self):
        """不需要梯度的输入不进入计算带"""
        with Tape() as tape:
            Tensor([1.0]) + Tensor([2.0])
            assert len(tape) == 0

    def test_nothing_recorded_outside_tape(self):
        """不在 with Tape() 中时运算不被记录，反复前向不会累积记录"""
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        for _ in range(100):
            y = tensor_sum(relu(x * 2.0))
        assert current_tape() is None
        assert not y.requires_grad
        assert y.is_leaf
        with Tape() as tape:
            tensor_sum(x * 2.0)
            assert current_tape() is tape
            assert len(tape) == 2
        assert current_tape() is None

    def test_leaf_loss(self):
        """叶子标量损失的梯度为 1"""
        x = Tensor(3.0, requires_grad=True)
        backward(x)
        np.testing.assert_array_equal(x.grad, 1.0)


class TestElementwise:
    """逐元素运算梯度"""

    def test_broadcast_bias_gradient(self, rng):
        """行广播加法的偏置梯度按行求和"""
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum((x + b) * (x + b))
            tape.backward(loss)
        np.testing.assert_allclose(b.grad, (2.0 * (x.data + b.data)).sum(axis=0))

    def test_add_bias_shape_check(self):
        """add_bias 形状不符抛出 ShapeError"""
        with pytest.raises(ShapeError):
            add_bias(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))

    def test_incompatible_broadcast(self):
        """不可广播的形状抛出 ShapeError"""
        with pytest.raises(ShapeError):
            Tensor(np.zeros(3)) + Tensor(np.zeros(4))

    def test_div_pow_sqrt(self, rng):
        """除法、幂与平方根梯度"""
        x = Tensor(rng.uniform(0.5, 2.0, size=5), requires_grad=True)
        _check_grad(lambda: tensor_sum((1.0 / x) + x ** 3 + x.sqrt()), x)

    def test_log_exp_softplus(self, rng):
        """log / exp / softplus 梯度"""
        x = Tensor(rng.uniform(0.2, 2.0, size=6), requires_grad=True)
        _check_grad(lambda: tensor_sum(log(x) + exp(x) + softplus(x)), x)

    def test_softplus_gradient_is_sigmoid(self):
        """softplus 的导数为 sigmoid"""
        x = Tensor([-3.0, 0.0, 4.0], requires_grad=True)
        with Tape() as tape:
            tape.backward(tensor_sum(softplus(x)))
        np.testing.assert_allclose(x.grad, sp_special.expit(x.data))

    def test_relu_subgradient_at_zero(self):
        """ReLU 在 0 处次梯度取 0"""
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        with Tape() as tape:
            tape.backward(tensor_sum(relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_special_function_gradients(self, rng):
        """lgamma 导数为 digamma，digamma 导数为 trigamma"""
        x = Tensor(rng.uniform(0.5, 5.0, size=4), requires_grad=True)
        with Tape() as tape:
            tape.backward(tensor_sum(lgamma(x)))
        np.testing.assert_allclose(x.grad, sp_special.digamma(x.data), rtol=1e-10)
        x.grad = None
        with Tape() as tape:
            tape.backward(tensor_sum(digamma(x)))
        np.testing.assert_allclose(x.grad, sp_special.polygamma(1, x.data), rtol=1e-10)


class TestDropout:
    """dropout"""

    def test_identity_when_not_training(self):
        """推理模式为恒等映射"""
        x = Tensor(np.ones((3, 3)))
        assert dropout(x, 0.5, training=False, rng=None) is x

    def test_invalid_probability(self):
        """p 不在 [0,1) 内抛出 ParameterError"""
        with pytest.raises(ParameterError):
            dropout(Tensor(np.ones(2)), 1.0, training=True, rng=np.random.default_rng(0))

    def test_inverted_scaling(self):
        """保留元素被放大 1/(1-p)"""
        x = Tensor(np.ones(10000))
        out = dropout(x, 0.25, training=True, rng=np.random.default_rng(1))
        kept = out.data[out.data > 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert abs(out.data.mean() - 1.0) < 0.05


class TestMatrixOps:
    """矩阵与稀疏运算"""

    def test_matmul_gradient(self, rng):
        """matmul 梯度与数值梯度一致"""
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        _check_grad(lambda: tensor_sum(matmul(a, b) ** 2), a)
        _check_grad(lambda: tensor_sum(matmul(a, b) ** 2), b)

    def test_matmul_shape_check(self):
        """内维不匹配抛出 ShapeError"""
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_spmm_gradient_is_transpose(self, rng):
        """spmm 对 x 的梯度为 Aᵀ g"""
        A = sp.random(5, 5, density=0.4, random_state=3, format="csr")
        x = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        w = rng.normal(size=(5, 2))
        with Tape() as tape:
            tape.backward(tensor_sum(spmm(A, x) * w))
        np.testing.assert_allclose(x.grad, A.T @ w)


class TestReductionsAndIndexing:
    """归约与索引运算"""

    def test_mean(self):
        """tensor_mean 的梯度为 1/n"""
        x = Tensor(np.arange(4.0), requires_grad=True)
        with Tape() as tape:
            loss = tensor_mean(x)
            tape.backward(loss)
        assert loss.item() == pytest.approx(1.5)
        np.testing.assert_allclose(x.grad, 0.25)

    def test_logsumexp(self, rng):
        """逐行 logsumexp 的值与梯度"""
        x = Tensor(rng.normal(size=(3, 4)) * 5.0, requires_grad=True)
        with no_grad():
            np.testing.assert_allclose(logsumexp(x, axis=1).data, sp_special.logsumexp(x.data, axis=1))
        _check_grad(lambda: tensor_sum(logsumexp(x, axis=1)), x)

    def test_take_per_row(self, rng):
        """按行取列及其梯度"""
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        cols = np.array([0, 3, 1])
        with Tape() as tape:
            out = take_per_row(x, cols)
            tape.backward(tensor_sum(out))
        np.testing.assert_array_equal(out.data, x.data[np.arange(3), cols])
        expected = np.zeros((3, 4))
        expected[np.arange(3), cols] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_row_gather_repeated_index(self, rng):
        """重复行索引的梯度累加"""
        x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        with Tape() as tape:
            tape.backward(tensor_sum(row_gather(x, [0, 0, 2])))
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_stack_columns(self, rng):
        """按列拼接及梯度"""
        a = Tensor(rng.normal(size=3), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        with Tape() as tape:
            tape.backward(tensor_sum(stack_columns([a, b]) * w))
        np.testing.assert_array_equal(a.grad, w[:, 0])
        np.testing.assert_array_equal(b.grad, w[:, 1])

    def test_row_norm_zero_row(self):
        """零行的范数梯度取 0"""
        x = Tensor([[3.0, 4.0], [0.0, 0.0]], requires_grad=True)
        with Tape() as tape:
            out = row_norm(x)
            tape.backward(tensor_sum(out))
        np.testing.assert_allclose(out.data, [5.0, 0.0])
        np.testing.assert_allclose(x.grad, [[0.6, 0.8], [0.0, 0.0]])

    def test_reshape(self):
        """reshape 非法形状抛出 ShapeError"""
        x = Tensor(np.arange(6.0))
        assert reshape(x, (2, 3)).shape == (2, 3)
        with pytest.raises(ShapeError):
            reshape(x, (4, 2))


class TestThreadIsolation:
    """计算带按线程隔离"""

    def test_parallel_tapes(self):
        """不同线程的计算带互不干扰"""
        from concurrent.futures import ThreadPoolExecutor

        def work(scale: float):
            x = Tensor([scale], requires_grad=True)
            with Tape() as tape:
                tape.backward(tensor_sum(x * x))
            return x.grad[0]

        with ThreadPoolExecutor(max_workers=4) as pool:
            grads = list(pool.map(work, [1.0, 2.0, 3.0, 4.0]))
        assert grads == [2.0, 4.0, 6.0, 8.0]


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
