"""
Main entry point for the ZIBBMR estimator.

Runs the command-line interface defined in src/main_app.py, e.g.

    python app_main.py fit --data counts.csv --config run.json --out fit.json
"""
import os
import sys

# Add the root directory to Python path to ensure imports work correctly
root_dir = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, root_dir)

from src.main_app import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
