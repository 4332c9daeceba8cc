#!/usr/bin/env python3
"""
Averaging Setup and Initialization
Run this once to check the environment and write a default configuration.
"""

import sys
import json
import logging
from dataclasses import asdict
from pathlib import Path

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parent


def check_python_version():
    """Verify Python 3.9+."""
    if sys.version_info < (3, 9):
        print(f"❌ Python 3.9+ required (you have {sys.version_info.major}.{sys.version_info.minor})")
        sys.exit(1)
    print(f"✅ Python {sys.version_info.major}.{sys.version_info.minor}")


def create_directories():
    """Create working directories for synthetic data and results."""
    for d in ("data", "results", "config"):
        (PROJECT_ROOT / d).mkdir(exist_ok=True)
    print("✅ Directories created")


def create_default_config():
    """Write averaging.json from the dataclass defaults if it is missing."""
    config_file = PROJECT_ROOT / "averaging.json"
    if config_file.exists():
        print("✅ Configuration file exists")
        return

    sys.path.insert(0, str(PROJECT_ROOT / "src"))
    from averaging.config import AppConfig

    with open(config_file, "w") as f:
        json.dump(asdict(AppConfig()), f, indent=2)
    print(f"✅ Configuration created: {config_file}")


def verify_dependencies():
    """Verify all required Python packages."""
    required = {
        "numpy": "Dense linear algebra",
        "scipy": "Rotation utilities",
        "networkx": "Viewing and triplet graphs",
        "pandas": "Traces and benchmark tables",
        "tenacity": "Resampling of degenerate draws",
    }
    optional = {
        "yaml": "YAML configuration files",
        "pytest": "Test runner",
        "hypothesis": "Property tests",
    }

    missing_required = []
    for package, description in required.items():
        try:
            __import__(package)
            print(f"✅ {package}")
        except ImportError:
            missing_required.append(package)
            print(f"❌ {package} - {description}")

    for package, description in optional.items():
        try:
            __import__(package)
            print(f"✅ {package} (optional)")
        except ImportError:
            print(f"⚠️ {package} (optional) - {description}")

    if missing_required:
        print("\n❌ Missing required packages:")
        for pkg in missing_required:
            print(f"   pip install {pkg}")
        return False
    return True


def print_summary():
    print("\n" + "=" * 60)
    print("AVERAGING SETUP COMPLETE")
    print("=" * 60)
    print("\nNext steps:")
    print("1. Synthetic scene:  python scripts/averager.py synth --n 10 --out data/meas.txt --gt data/gt.txt")
    print("2. Average:          python scripts/averager.py average data/meas.txt --out results/poses.txt")
    print("3. Evaluate:         python scripts/averager.py eval results/poses.txt data/gt.txt")
    print("4. Tests:            pytest scripts")
    print("\nConfiguration file: averaging.json")
    print("=" * 60)


def main():
    print("Averaging Setup\n")
    check_python_version()
    create_directories()
    if not verify_dependencies():
        print("\n⚠️ Install dependencies: pip install -r requirements.txt")
        return
    create_default_config()
    print_summary()


if __name__ == "__main__":
    main()
