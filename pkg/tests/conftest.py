import string
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from acceptance_log import LINES  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(LINES, key=lambda c: (int(c.rstrip(string.ascii_lowercase)), c)):
            terminalreporter.write_line(LINES[key])
