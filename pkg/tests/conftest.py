import shutil
import subprocess

import pytest

from fnbounds.binary import FunctionRecord, build_elf, parse_code_image
from fnbounds.corpus import SyntheticSpec, generate_synthetic_corpus, load_corpus

HAVE_OBJDUMP = shutil.which("objdump") is not None
HAVE_CC = shutil.which("cc") is not None

needs_objdump = pytest.mark.skipif(not HAVE_OBJDUMP, reason="objdump not available")
needs_cc = pytest.mark.skipif(not HAVE_CC, reason="cc not available")


def objdump_text(path: str, *extra: str) -> str:
    return subprocess.run(
        ["objdump", "-d", *extra, str(path)], capture_output=True, text=True, check=True
    ).stdout


def objdump_raw(data: bytes, tmp_path) -> str:
    blob = tmp_path / "blob.bin"
    blob.write_bytes(data)
    return subprocess.run(
        ["objdump", "-D", "-b", "binary", "-m", "i386:x86-64", str(blob)],
        capture_output=True, text=True, check=True,
    ).stdout


def make_image(text: bytes, functions=None, image_id="img", base=0x401000):
    functions = functions if functions is not None else [
        FunctionRecord(base, len(text), "f0")
    ]
    return parse_code_image(build_elf(text, functions, text_address=base), image_id=image_id)


@pytest.fixture
def synth_corpus(tmp_path):
    """Factory: generate a corpus and return its (image, label map) pairs."""

    def _make(seed=7, subdir=None, **kwargs):
        spec = SyntheticSpec(**kwargs)
        out = tmp_path / (subdir or f"corpus-{seed}-{spec.config_name}")
        _, _, manifest = generate_synthetic_corpus(spec, seed, out)
        return load_corpus(manifest)

    return _make
