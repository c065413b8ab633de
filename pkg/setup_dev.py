#!/usr/bin/env python3
"""
Development Environment Setup for DistillForge
Validates the numeric stack and runs a seconds-long smoke distillation
"""

import importlib
import sys
import tempfile
from pathlib import Path

REQUIRED_PACKAGES = [("torch", "torch"), ("numpy", "numpy"), ("Pillow", "PIL"), ("PyYAML", "yaml")]

SMOKE_CONFIG = """
classes = 2
per_class = 6
test_per_class = 6
channels = 1
height = 2
width = 2
hidden = 4
experts = 1
expert_epochs = 3
N = 2
M = 1
T_minus = 0
T_init = 1
T_plus = 2
ipc = 1
iterations = 2
checkpoint_every = 0
log_every = 0
eval_epochs = 2
eval_seeds = 1
baseline_seeds = 1
"""


def check_python_version():
    """Check if Python version is compatible"""
    if sys.version_info < (3, 9):
        print("❌ Python 3.9+ required")
        return False
    print(f"✅ Python {sys.version.split()[0]}")
    return True


def check_packages():
    """Check every package from requirements.txt imports"""
    missing = []
    for name, module in REQUIRED_PACKAGES:
        try:
            version = getattr(importlib.import_module(module), "__version__", "unknown version")
            print(f"✅ {name}: {version}")
        except ImportError:
            missing.append(name)
    if missing:
        print(f"❌ Missing packages: {', '.join(missing)}")
        print("   Install: pip install -r requirements.txt")
        return False
    return True


def check_double_backward():
    """Check second-order autograd works in double precision"""
    try:
        import torch
        x = torch.tensor([0.3, -0.7], dtype=torch.float64, requires_grad=True)
        (grad,) = torch.autograd.grad(torch.tanh(x).pow(3).sum(), x, create_graph=True)
        (second,) = torch.autograd.grad(grad.sum(), x)
        if not bool(torch.isfinite(second).all()):
            print("❌ Hessian-vector products returned non-finite values")
            return False
        print("✅ Double backward in float64")
        return True
    except Exception as e:
        print(f"❌ Autograd error: {e}")
        return False


def run_smoke_test():
    """Generate one expert, distill two iterations and evaluate"""
    sys.path.insert(0, str(Path(__file__).parent))
    try:
        from distillforge_main import run_command
    except ImportError as e:
        print(f"❌ Import error: {e}")
        return False

    with tempfile.TemporaryDirectory() as temp_dir:
        config = Path(temp_dir) / "smoke.cfg"
        config.write_text(SMOKE_CONFIG)
        common = ["--config", str(config), "--out", str(Path(temp_dir) / "run"), "--quiet"]
        for command in ("gen-experts", "distill", "eval"):
            code = run_command([command, *common])
            if code != 0:
                print(f"❌ Smoke run failed at '{command}' (exit {code})")
                return False
    print("✅ Smoke run: gen-experts, distill, eval")
    return True


def main():
    """Run development environment check"""
    print("🚀 DistillForge Development Environment Setup")
    print("=" * 50)

    checks = [
        ("Python Version", check_python_version),
        ("Packages", check_packages),
        ("Second-order Autograd", check_double_backward),
        ("Smoke Run", run_smoke_test),
    ]

    passed = 0
    for name, check_func in checks:
        print(f"\n📋 Checking {name}...")
        if check_func():
            passed += 1
        else:
            print(f"❌ {name} check failed")
            break

    print(f"\n{'='*50}")
    print(f"✅ {passed}/{len(checks)} checks passed")

    if passed == len(checks):
        print("\n🎉 Development environment ready!")
        print("\nNext steps:")
        print("1. Run: pytest")
        print("2. Run: python3 distillforge_main.py gen-experts --config config/toy.cfg --out runs/toy")
        print("3. Then distill, eval and render against the same --out directory")
        return 0

    print(f"\n⚠️  Fix {len(checks) - passed} issues before continuing")
    return 1


if __name__ == "__main__":
    sys.exit(main())
