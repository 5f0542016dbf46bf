"""
Stream Launcher
Checks the environment, then hands the command line to scripts/stream_cli.py.

    python run_stream.py                 # demo run: live2diff on the drifting sine source
    python run_stream.py verify          # any stream_cli subcommand works
"""

import sys
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables first (STREAM_CONFIG, STREAM_LOG_LEVEL)
load_dotenv()

project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))


def check_environment() -> bool:
    """
    Check if environment is properly configured.
    Verifies the config file exists and creates the output directories.
    """
    errors = []

    config_file = project_root / "config" / "app_config.yaml"
    if not config_file.exists():
        errors.append("❌ config/app_config.yaml not found.")

    for sub in ("exports", "logs"):
        directory = project_root / "data" / sub
        if not directory.exists():
            directory.mkdir(parents=True, exist_ok=True)
            print(f"✓ Created {sub} directory")

    if errors:
        print("\n⚠️  CONFIGURATION ERRORS:\n")
        for error in errors:
            print(f"  {error}")
        print("\nPlease fix these issues before running.\n")
        return False
    return True


def main() -> int:
    """Main launcher function."""
    print("=" * 60)
    print("LIVE STREAM DIFFUSION ENGINE")
    print("=" * 60)
    print()

    if not check_environment():
        return 1
    print("✓ Environment check passed")
    print()

    from scripts.stream_cli import main as cli_main

    argv = sys.argv[1:] or ["run", "--mode", "live2diff", "--source", "drifting_sine", "--frames", "64"]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
