#!/usr/bin/env python3
"""
运行环境自检
依赖包、项目模块、数值自检与一次小图前向计算
"""
import math
import sys
from importlib import import_module
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

BASE_DIR = Path(__file__).parent
sys.path.insert(0, str(BASE_DIR))
sys.path.insert(0, str(BASE_DIR / "src"))

MIN_PYTHON = (3, 10)

# (导入名, 发行包名)
DEPENDENCIES = [
    ("numpy", "numpy"),
    ("scipy", "scipy"),
    ("sklearn", "scikit-learn"),
    ("pandas", "pandas"),
    ("pydantic", "pydantic"),
    ("pydantic_settings", "pydantic-settings"),
    ("dotenv", "python-dotenv"),
    ("pytest", "pytest"),
]

PROJECT_MODULES = ["errors", "special", "diffcore", "graphcore", "encoder", "flows",
                   "posterior", "training", "baselines", "datasets", "metrics", "experiments"]


def check_interpreter() -> bool:
    current = sys.version_info[:3]
    ok = current[:2] >= MIN_PYTHON
    mark = "✓" if ok else "✗"
    print(f"{mark} Python {'.'.join(map(str, current))}（需要 >= {'.'.join(map(str, MIN_PYTHON))}）")
    return ok


def check_dependencies() -> list:
    """返回缺失的发行包名"""
    missing = []
    for module_name, dist_name in DEPENDENCIES:
        try:
            import_module(module_name)
            print(f"✓ {dist_name} {version(dist_name)}")
        except (ImportError, PackageNotFoundError):
            print(f"✗ {dist_name} 未安装")
            missing.append(dist_name)
    return missing


def check_project_modules() -> bool:
    failed = []
    for name in PROJECT_MODULES:
        try:
            import_module(name)
        except Exception as exc:
            failed.append(name)
            print(f"✗ src/{name}.py: {exc}")
    if not failed:
        print(f"✓ {len(PROJECT_MODULES)} 个模块全部可导入")
    return not failed


def check_numerics() -> bool:
    """lgamma 与标准库对照，并确认 BLAS 上的 float64 结果有限"""
    import numpy as np
    from special import lgamma

    points = [0.1, 0.5, 1.0, 3.7, 25.0, 1e4]
    worst = max(abs(lgamma(x) - math.lgamma(x)) / max(1.0, abs(math.lgamma(x))) for x in points)
    product = np.ones((64, 64)) @ np.ones((64, 64))
    ok = worst < 1e-10 and bool(np.all(product == 64.0))
    print(f"{'✓' if ok else '✗'} lgamma 最大相对误差 {worst:.1e}，矩阵乘法{'正常' if product[0, 0] == 64.0 else '异常'}")
    return ok


def check_forward_pass() -> bool:
    """三节点路径图上的一次前向计算"""
    import numpy as np
    from graphcore import SparseGraph
    from posterior import GpnConfig, GraphPosteriorNetwork

    graph = SparseGraph.from_edge_list(3, [(0, 1), (1, 2)])
    config = GpnConfig(hidden_dim=4, latent_dim=2, n_radial=1, dropout=0.0)
    model = GraphPosteriorNetwork.for_graph(config, input_dim=3, num_classes=2, graph=graph)
    output = model(np.eye(3))
    alpha = output.posterior.alpha.data
    ok = alpha.shape == (3, 2) and bool(np.all(np.isfinite(alpha))) and bool(np.all(alpha >= 1.0))
    print(f"{'✓' if ok else '✗'} 前向计算: α0 = {np.round(output.posterior.alpha0, 3).tolist()}")
    return ok


def check_settings() -> bool:
    try:
        from config import settings
    except Exception as exc:
        print(f"✗ 配置加载失败: {exc}")
        return False
    print(f"✓ 配置: L={settings.latent_dim}, 流层数={settings.n_radial}, "
          f"τ={settings.teleport}, K={settings.iterations}, 输出目录={settings.output_dir}")
    if not (BASE_DIR / ".env").exists():
        print("  未找到 .env，使用默认值（可用 GPN_ 前缀的环境变量覆盖）")
    return True


def main() -> int:
    print("🔧 图后验网络环境自检\n")
    results = {"interpreter": check_interpreter()}
    missing = check_dependencies()
    results["dependencies"] = not missing

    if missing:
        print(f"\n❌ 缺少依赖: {', '.join(missing)}，请先运行 uv sync")
        return 1

    results["modules"] = check_project_modules()
    results["settings"] = check_settings()
    if results["modules"]:
        results["numerics"] = check_numerics()
        results["forward"] = check_forward_pass()

    failed = [name for name, ok in results.items() if not ok]
    if failed:
        print(f"\n❌ 未通过: {', '.join(failed)}")
        return 1
    print("\n✅ 环境正常，可以运行:")
    print("   python main.py synth --out data/synthetic")
    print("   python main.py train --data data/synthetic --out results/train")
    print("   pytest -m 'not slow'")
    return 0


if __name__ == "__main__":
    sys.exit(main())
