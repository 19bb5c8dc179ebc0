"""Record the golden files used by the test suite.

Run once after an intentional change to the report template, the shipped
weights or the synthetic generator; review the diff before committing.
"""

import argparse
import io
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from report_fixture import SEVEN_LESIONS, SIZE  # noqa: E402

from retinaxai import cli, report  # noqa: E402

GOLDEN = ROOT / "tests" / "golden"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", type=Path, default=GOLDEN)
    args = ap.parse_args()
    args.out_dir.mkdir(parents=True, exist_ok=True)

    text = report.render_text(report.aggregate(SEVEN_LESIONS, SIZE, SIZE))
    (args.out_dir / "report_seven.txt").write_text(text)

    with tempfile.TemporaryDirectory() as tmp:
        scenes = Path(tmp) / "scenes"
        code = cli.main(["synth", "--seed", "5000", "--n", "20", "--out-dir", str(scenes)], io.StringIO())
        assert code == 0, code
        buf = io.StringIO()
        code = cli.main(["eval", "--scenes", str(scenes)], buf)
        assert code == 0, code
    (args.out_dir / "eval_table.txt").write_text(buf.getvalue())
    print(buf.getvalue(), end="")


if __name__ == "__main__":
    main()
