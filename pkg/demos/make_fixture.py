"""Regenerate the small synthetic panel bundled under tests/fixtures.

Run from the repository root::

    python3 demos/make_fixture.py
"""

from pathlib import Path

from deepstress.panel import write_bank_panel, write_macro
from deepstress.synthetic import synthetic_panel

HERE = Path(__file__).resolve().parent
DEST = HERE.parent / "tests" / "fixtures"


def main(dest=DEST):
    dest.mkdir(parents=True, exist_ok=True)
    records, macro = synthetic_panel(n_banks=40, n_quarters=24, seed=11, failed_banks=2)
    write_bank_panel(records, dest / "banks.csv")
    write_macro(macro, dest / "macro.csv")
    print(f"wrote {len(records)} bank records and {len(macro)} macro quarters to {dest}")


if __name__ == "__main__":
    main()
