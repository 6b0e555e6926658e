#!/usr/bin/env python3
"""
Quick setup verification script for DiffKG
Run this after installation to verify everything is importable and configured
"""

import importlib
import sys
from pathlib import Path

ROOT_DIR = Path(__file__).resolve().parents[1]

# import name -> requirement name
PACKAGES = {
    "numpy": "numpy",
    "scipy": "scipy",
    "pydantic": "pydantic",
    "pydantic_settings": "pydantic-settings",
    "dotenv": "python-dotenv",
    "portalocker": "portalocker",
    "sacrebleu": "sacrebleu",
    "pytest": "pytest",
    "hypothesis": "hypothesis",
}


def check_python_version():
    version = sys.version_info
    if version >= (3, 9):
        print(f"✅ Python {version.major}.{version.minor}.{version.micro} (OK)")
        return True
    print(f"❌ Python {version.major}.{version.minor}.{version.micro} (Need 3.9+)")
    return False


def check_dependencies():
    """Check that every required package imports"""
    missing = []
    for module, requirement in PACKAGES.items():
        try:
            importlib.import_module(module)
            print(f"✅ {requirement}")
        except ImportError:
            print(f"❌ {requirement} (missing)")
            missing.append(requirement)
    return not missing


def check_config_files():
    ok = True
    for path in [ROOT_DIR / "backend/.env", *sorted((ROOT_DIR / "backend/configs").glob("*.env"))]:
        if path.exists():
            print(f"✅ {path}")
        else:
            print(f"⚠️  {path} not found")
            ok = path.name != ".env" and ok
    return ok


def check_directories():
    for directory in (ROOT_DIR / "backend/data", ROOT_DIR / "backend/logs", ROOT_DIR / "backend/checkpoints"):
        if directory.exists():
            print(f"✅ {directory} directory exists")
            continue
        try:
            directory.mkdir(parents=True, exist_ok=True)
            print(f"✅ Created {directory}")
        except OSError as e:
            print(f"❌ Failed to create {directory}: {e}")
            return False
    return True


def main():
    print("🔍 DiffKG - Setup Verification")
    print("=" * 50)

    all_good = True

    print("\n📋 Checking Python version...")
    all_good &= check_python_version()

    print("\n📦 Checking Python dependencies...")
    all_good &= check_dependencies()

    print("\n⚙️  Checking configuration...")
    all_good &= check_config_files()

    print("\n📁 Checking directories...")
    all_good &= check_directories()

    print("\n" + "=" * 50)
    if all_good:
        print("🎉 All checks passed! Your system is ready.")
        print("\n📝 Next steps:")
        print("1. cd backend/src && python main.py gradcheck")
        print("2. cd backend && pytest")
    else:
        print("❌ Some issues found. Please fix them before proceeding.")
        print("\n🛠️  Common fixes:")
        print("- Install dependencies: pip install -r requirements.txt")
        print("- Copy environment: cp backend/.env.example backend/.env")
    return 0 if all_good else 1


if __name__ == "__main__":
    sys.exit(main())
