"""Regenerate docs/config_reference.md from the config schema."""
from pathlib import Path

from bess_control.config import reference

if __name__ == "__main__":
    path = Path(__file__).resolve().parents[1] / "docs" / "config_reference.md"
    path.write_text(reference() + "\n")
    print(f"wrote {path}")
