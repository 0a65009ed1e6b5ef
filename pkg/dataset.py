"""Series collection files, random-walk generation and the answer oracle.

A collection file is a fixed little-endian header followed by the series
as float32 little-endian values, row after row:

    magic  b"ODSY"
    u16    format version (1)
    u64    series count
    u32    series length
    u8     value encoding (1 = float32 little-endian)

Query files use the same format.
"""
from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np
import numpy.typing as npt

from lcg import LcgBank
from series import Collection, InvalidInput, Series, dtw_distance

MAGIC = b"ODSY"
VERSION = 1
FLOAT32_LE = 1

HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u2"),
        ("count", "<u8"),
        ("length", "<u4"),
        ("encoding", "u1"),
    ]
)
VALUES = np.dtype("<f4")

Neighbors = list[tuple[float, int]]

log = logging.getLogger(__name__)


class CorruptFile(ValueError):
    """A collection or models file that cannot be read."""


def generate_random_walk(count: int, length: int, seed: int) -> Collection:
    """Cumulative sums of N(0,1) steps, one portable stream per series.

    Series i depends only on (seed, i), not on count.
    """
    if count < 1 or length < 1:
        raise InvalidInput(f"need count, length >= 1, got {count}, {length}")
    bank = LcgBank(seed, count)
    steps = np.empty((count, length))
    for t in range(length):
        steps[:, t] = bank.gaussian()
    return np.cumsum(steps, axis=1)


def write_dataset(data: Collection, path: Path) -> None:
    if data.ndim != 2:
        raise InvalidInput(f"expected a 2-D collection, got {data.shape}")
    header = np.array(
        [(MAGIC, VERSION, data.shape[0], data.shape[1], FLOAT32_LE)],
        dtype=HEADER,
    )
    with path.open("wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(data, dtype=VALUES).tobytes())
    log.debug("wrote %d x %d series to %s", *data.shape, path)


def read_dataset(path: Path) -> Collection:
    raw = path.read_bytes()
    if len(raw) < HEADER.itemsize:
        raise CorruptFile(f"{path}: {len(raw)} bytes, shorter than a header")
    header = np.frombuffer(raw, dtype=HEADER, count=1)[0]
    if header["magic"] != MAGIC:
        raise CorruptFile(f"{path}: bad magic {header['magic']!r}")
    if header["version"] != VERSION or header["encoding"] != FLOAT32_LE:
        raise CorruptFile(
            f"{path}: unsupported version {header['version']}"
            f" / encoding {header['encoding']}"
        )
    count, length = int(header["count"]), int(header["length"])
    expect = HEADER.itemsize + count * length * VALUES.itemsize
    if len(raw) != expect:
        raise CorruptFile(f"{path}: {len(raw)} bytes, header implies {expect}")
    if count * length == 0:
        return np.empty((count, length))
    values = np.frombuffer(raw, dtype=VALUES, offset=HEADER.itemsize)
    if not np.isfinite(values).all():
        bad = int(np.count_nonzero(~np.isfinite(values)))
        raise CorruptFile(f"{path}: {bad} NaN or infinite values")
    return values.astype(np.float64).reshape(count, length)


def import_raw(src: Path, length: int, dst: Path) -> int:
    """Convert headerless float32 little-endian series to a collection."""
    if length < 1:
        raise InvalidInput(f"series length must be positive, got {length}")
    values: npt.NDArray[np.float32] = np.fromfile(src, dtype=VALUES)
    if len(values) % length:
        raise CorruptFile(
            f"{src}: {len(values)} values is not a multiple of {length}"
        )
    data = values.reshape(-1, length)
    write_dataset(data.astype(np.float64), dst)
    log.info("imported %d series of length %d from %s", len(data), length, src)
    return len(data)


def brute_force_knn(
    data: Collection, queries: Collection, k: int = 1, dtw_window: int = 0
) -> list[Neighbors]:
    """Exact k nearest neighbours of every query by linear scan."""
    ret = []
    for q in queries:
        dists: Series
        if dtw_window:
            dists = np.array([dtw_distance(q, s, dtw_window) for s in data])
        else:
            dists = np.sqrt(((data - q) ** 2).sum(axis=1))
        order = np.argsort(dists, kind="stable")[:k]
        ret.append([(float(dists[i]), int(i)) for i in order])
    return ret


def write_answers(answers: list[Neighbors], path: Path) -> None:
    with path.open("w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["query", "rank", "distance", "series"])
        for q, neighbors in enumerate(answers):
            for rank, (dist, sid) in enumerate(neighbors):
                out.writerow([q, rank, repr(dist), sid])


def read_answers(path: Path) -> list[Neighbors]:
    ret: list[Neighbors] = []
    with path.open(newline="") as f:
        for row in csv.DictReader(f):
            q = int(row["query"])
            while len(ret) <= q:
                ret.append([])
            ret[q].append((float(row["distance"]), int(row["series"])))
    return ret


def compare_answers(
    got: list[Neighbors], expect: list[Neighbors], rel_tol: float = 1e-6
) -> list[str]:
    """Mismatches between two answer sets, compared on distances only."""
    if len(got) != len(expect):
        return [f"{len(got)} answered queries, expected {len(expect)}"]
    ret = []
    for q, (a, b) in enumerate(zip(got, expect)):
        da, db = [d for d, _ in a], [d for d, _ in b]
        if len(da) != len(db) or not all(
            math.isclose(x, y, rel_tol=rel_tol, abs_tol=1e-9)
            for x, y in zip(da, db)
        ):
            ret.append(f"query {q}: {da} != {db}")
    return ret


# Unit tests


def test_write_read_round_trip(tmp_path: Path):
    data = generate_random_walk(7, 33, 5).astype(np.float32)
    write_dataset(data.astype(np.float64), tmp_path / "d.bin")
    back = read_dataset(tmp_path / "d.bin")
    assert back.shape == (7, 33)
    assert np.array_equal(back.astype(np.float32), data)
    size = (tmp_path / "d.bin").stat().st_size
    assert size == HEADER.itemsize + 7 * 33 * 4


def test_empty_collection(tmp_path: Path):
    write_dataset(np.empty((0, 16)), tmp_path / "e.bin")
    assert read_dataset(tmp_path / "e.bin").shape == (0, 16)


def test_corrupt_files(tmp_path: Path):
    path = tmp_path / "d.bin"
    write_dataset(generate_random_walk(3, 8, 0), path)
    raw = path.read_bytes()
    for bad in [raw[:-4], raw[:10], b"XXXX" + raw[4:]]:
        path.write_bytes(bad)
        try:
            read_dataset(path)
        except CorruptFile:
            pass
        else:
            assert False, f"accepted {len(bad)} corrupt bytes"


def test_non_finite_values_are_corrupt(tmp_path: Path):
    path = tmp_path / "d.bin"
    for bad in [np.nan, np.inf, -np.inf]:
        data = generate_random_walk(4, 8, 1)
        data[2, 5] = bad
        write_dataset(data, path)
        try:
            read_dataset(path)
        except CorruptFile:
            pass
        else:
            assert False, f"accepted {bad}"


def test_generation_is_deterministic_per_series():
    a = generate_random_walk(20, 50, 9)
    assert np.array_equal(a, generate_random_walk(20, 50, 9))
    assert np.array_equal(a[:5], generate_random_walk(5, 50, 9))
    assert not np.array_equal(a, generate_random_walk(20, 50, 10))
    single = generate_random_walk(3, 1, 9)
    assert np.array_equal(single[:, 0], a[:3, 0])


def test_generated_steps_are_standard_normal():
    steps = np.diff(generate_random_walk(100, 101, 3), axis=1).ravel()
    assert len(steps) == 10_000
    assert abs(steps.mean()) < 0.05 and abs(steps.var() - 1) < 0.1


def test_import_raw(tmp_path: Path):
    values = np.arange(12, dtype="<f4")
    values.tofile(tmp_path / "raw.f32")
    assert import_raw(tmp_path / "raw.f32", 4, tmp_path / "d.bin") == 3
    back = read_dataset(tmp_path / "d.bin")
    assert back.tolist() == values.reshape(3, 4).tolist()
    try:
        import_raw(tmp_path / "raw.f32", 5, tmp_path / "x.bin")
    except CorruptFile:
        pass
    else:
        assert False, "accepted a ragged raw file"


def test_brute_force_knn():
    data = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 0.0], [0.0, 2.0]])
    queries = np.array([[0.0, 0.0], [3.0, 3.0]])
    got = brute_force_knn(data, queries, k=2)
    assert got == [[(0.0, 0), (1.0, 2)], [(1.0, 1), (math.sqrt(10), 3)]]
    dtw = brute_force_knn(data, queries, k=1, dtw_window=1)
    assert dtw[0] == [(0.0, 0)]


def test_answers_file_and_compare(tmp_path: Path):
    answers = [[(0.5, 3), (0.75, 1)], [(1 / 3, 0)]]
    write_answers(answers, tmp_path / "a.csv")
    back = read_answers(tmp_path / "a.csv")
    assert back == answers
    assert compare_answers(back, answers) == []
    off = [[(0.5, 3), (0.76, 1)], [(1 / 3, 7)]]
    assert compare_answers(off, answers) == [
        "query 0: [0.5, 0.76] != [0.5, 0.75]"
    ]
