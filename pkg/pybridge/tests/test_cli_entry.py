import subprocess
import sys

import numpy as np
import pytest

from pybridge.cli import main
from pybridge.wire import write_idv


def _in_file(tmp_path, rows=3, dim=5):
    path = tmp_path / "in.idv"
    write_idv(path, np.random.default_rng(0).standard_normal((rows, dim)).astype(np.float32))
    return path


def test_happy_path_returns_0(tmp_path):
    in_file = _in_file(tmp_path)
    assert main(["--in", str(in_file), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "out.idv").exists()


def test_missing_required_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["--out", "somewhere"])
    assert exc.value.code == 2


def test_unknown_mode_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["--in", "x", "--out", "y", "--mode", "video"])
    assert exc.value.code == 2


def test_bad_batch_size_returns_2(tmp_path, capsys):
    in_file = _in_file(tmp_path)
    rc = main(["--in", str(in_file), "--out", str(tmp_path / "o"),
               "--batch-size", "0"])
    assert rc == 2
    assert "batch_size" in capsys.readouterr().err


def test_module_invocation_exit_codes(tmp_path):
    # the engine runs the adapter as a subprocess; exercise that surface
    in_file = _in_file(tmp_path)
    ok = subprocess.run(
        [sys.executable, "-m", "pybridge",
         "--in", str(in_file), "--out", str(tmp_path / "o")],
        capture_output=True, text=True,
    )
    assert ok.returncode == 0, ok.stderr

    bad = tmp_path / "bad.idv"
    bad.write_bytes(b"garbage")
    err = subprocess.run(
        [sys.executable, "-m", "pybridge",
         "--in", str(bad), "--out", str(tmp_path / "o2")],
        capture_output=True, text=True,
    )
    assert err.returncode == 3
    assert "bad input" in err.stderr
