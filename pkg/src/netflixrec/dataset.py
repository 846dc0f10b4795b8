"""Netflix-prize file parsing, id remapping, temporal split and sparse matrices.

Ratings are held column-wise in numpy arrays: one row per (user, movie,
rating, date) triple. Dates are day counts from 1998-01-01 so that the whole
1998-2005 range fits in an int16.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import io
import logging
import os
import re
import tarfile
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional

import numpy as np
import pandas as pd

_log = logging.getLogger(__name__)

EPOCH = dt.date(1998, 1, 1)
_EPOCH64 = np.datetime64("1998-01-01", "D")
_HEADER_RE = re.compile(rb"^\s*(\d+)\s*:\s*$")
_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")

CACHE_MAGIC = b"NFLX1"
CACHE_VERSION = 1


class ParseError(ValueError):
    """Malformed input file. Carries the file name and 1-based line number."""

    def __init__(self, source: str, line: int, message: str):
        self.source = source
        self.line = line
        super().__init__(f"{source}:{line}: {message}")


class RatingTriple(NamedTuple):
    user: int
    movie: int
    rating: int
    date: dt.date


def date_to_day(d: dt.date) -> int:
    return (d - EPOCH).days


def day_to_date(day: int) -> dt.date:
    return EPOCH + dt.timedelta(days=int(day))


class IdIndex:
    """Bijection between external ids and dense indices ``[0, n)``."""

    def __init__(self, ids: np.ndarray):
        self.ids = np.asarray(ids, dtype=np.int64)
        self._order = np.argsort(self.ids, kind="stable")
        self._sorted = self.ids[self._order]
        if len(self._sorted) > 1 and np.any(self._sorted[1:] == self._sorted[:-1]):
            raise ValueError("external ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    def to_dense(self, external) -> np.ndarray:
        """Map external ids to dense indices; unknown ids map to -1."""
        ext = np.asarray(external, dtype=np.int64)
        if len(self._sorted) == 0:
            return np.full(ext.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted, ext)
        pos_c = np.minimum(pos, len(self._sorted) - 1)
        hit = self._sorted[pos_c] == ext
        return np.where(hit, self._order[pos_c], -1)

    def dense(self, external_id: int) -> int:
        return int(self.to_dense(np.array([external_id]))[0])

    def to_external(self, dense) -> np.ndarray:
        return self.ids[np.asarray(dense, dtype=np.int64)]

    def __contains__(self, external_id: int) -> bool:
        return self.dense(external_id) >= 0


def _first_seen(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique values in first-seen order and the dense code of every element."""
    if len(values) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    uniq, first, inverse = np.unique(values, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    order = np.argsort(first, kind="stable")
    rank[order] = np.arange(len(uniq))
    return uniq[order].astype(np.int64), rank[inverse.ravel()]


class RatingStore:
    """Immutable columnar collection of rating triples.

    Dense user/movie indices are assigned in first-seen order.
    """

    def __init__(self, users, movies, ratings, days):
        self.users = np.ascontiguousarray(users, dtype=np.int32)
        self.movies = np.ascontiguousarray(movies, dtype=np.int32)
        self.ratings = np.ascontiguousarray(ratings, dtype=np.int8)
        self.days = np.ascontiguousarray(days, dtype=np.int16)
        n = len(self.users)
        if not (len(self.movies) == len(self.ratings) == len(self.days) == n):
            raise ValueError("column lengths differ")
        if n and (self.ratings.min() < 1 or self.ratings.max() > 5):
            raise ValueError("ratings must be in 1..5")
        user_ids, self.user_idx = _first_seen(self.users)
        movie_ids, self.movie_idx = _first_seen(self.movies)
        self.user_index = IdIndex(user_ids)
        self.movie_index = IdIndex(movie_ids)
        for arr in (self.users, self.movies, self.ratings, self.days, self.user_idx, self.movie_idx):
            arr.setflags(write=False)

    @classmethod
    def empty(cls) -> "RatingStore":
        return cls([], [], [], [])

    @classmethod
    def from_triples(cls, triples: Iterable[RatingTriple]) -> "RatingStore":
        rows = list(triples)
        return cls(
            [t.user for t in rows],
            [t.movie for t in rows],
            [t.rating for t in rows],
            [date_to_day(t.date) for t in rows],
        )

    def __len__(self) -> int:
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def n_movies(self) -> int:
        return len(self.movie_index)

    def triple(self, i: int) -> RatingTriple:
        return RatingTriple(
            int(self.users[i]), int(self.movies[i]), int(self.ratings[i]), day_to_date(self.days[i])
        )

    def __iter__(self) -> Iterator[RatingTriple]:
        for i in range(len(self)):
            yield self.triple(i)

    def take(self, rows: np.ndarray) -> "RatingStore":
        """Subset (in the given row order) with freshly assigned dense ids."""
        return RatingStore(self.users[rows], self.movies[rows], self.ratings[rows], self.days[rows])

    def same_as(self, other: "RatingStore") -> bool:
        return (
            np.array_equal(self.users, other.users)
            and np.array_equal(self.movies, other.movies)
            and np.array_equal(self.ratings, other.ratings)
            and np.array_equal(self.days, other.days)
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.users, self.movies, self.ratings, self.days):
            h.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# training_set parsing


def _slow_parse_block(name: str, data: bytes):
    """Line-by-line parser used when the vectorized path rejects a file.

    Either raises ParseError pointing at the offending line or returns the
    parsed columns plus the source line number of every row.
    """
    lines = data.split(b"\n")
    movie = None
    users, ratings, days, linenos = [], [], [], []
    lineno = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if movie is None:
            if not line and lineno == len(lines):
                break
            m = _HEADER_RE.match(line)
            if not m:
                raise ParseError(name, lineno, f"expected '<movie id>:' header, got {raw[:40]!r}")
            movie = int(m.group(1))
            continue
        if not line:
            continue
        parts = line.split(b",")
        if len(parts) != 3:
            raise ParseError(name, lineno, f"expected 'user,rating,date', got {raw[:40]!r}")
        try:
            user = int(parts[0])
            rating = int(parts[1])
        except ValueError:
            raise ParseError(name, lineno, f"non-integer field in {raw[:40]!r}") from None
        if not 1 <= rating <= 5:
            raise ParseError(name, lineno, f"rating {rating} outside 1..5")
        text = parts[2].decode("ascii", "replace")
        try:
            if not _DATE_RE.match(text):
                raise ValueError
            day = date_to_day(dt.date.fromisoformat(text))
        except ValueError:
            raise ParseError(name, lineno, f"unparsable date {text!r}") from None
        users.append(user)
        ratings.append(rating)
        days.append(day)
        linenos.append(lineno)
    if movie is None:
        raise ParseError(name, max(lineno, 1), "missing '<movie id>:' header")
    cols = (np.array(c, dtype=np.int64) for c in (users, ratings, days))
    return (movie, *cols, linenos)


def _parse_block(name: str, data: bytes):
    """Vectorized parse of one per-movie file, with a strict fallback."""
    head, _, body = data.partition(b"\n")
    m = _HEADER_RE.match(head)
    if not m or b":" in body or b"\n\n" in body.rstrip(b"\r\n") or body[:1] in (b"\n", b"\r"):
        return _slow_parse_block(name, data)[:4]
    movie = int(m.group(1))
    if not body.strip():
        empty = np.empty(0, dtype=np.int64)
        return movie, empty, empty, empty
    try:
        frame = pd.read_csv(
            io.BytesIO(body),
            header=None,
            names=["user", "rating", "date"],
            dtype={"user": np.int64, "rating": np.int64, "date": str},
            skip_blank_lines=False,
            engine="c",
        )
        dates = frame["date"].to_numpy(dtype=str)
        if len(dates) and (np.char.str_len(dates) != 10).any():
            raise ValueError("date width")
        days = (dates.astype("datetime64[D]") - _EPOCH64).astype(np.int64)
        ratings = frame["rating"].to_numpy()
        if ratings.min() < 1 or ratings.max() > 5:
            raise ValueError("rating range")
        users = frame["user"].to_numpy()
    except (ValueError, TypeError, pd.errors.ParserError):
        return _slow_parse_block(name, data)[:4]
    return movie, users, ratings, days


def _iter_sources(path: Path) -> list[tuple[str, callable]]:
    """List (name, loader) pairs for every per-movie file, in name order."""
    if path.is_dir():
        sub = path / "training_set"
        root = sub if sub.is_dir() and not any(path.glob("*.txt")) else path
        files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix == ".txt")
        return [(p.name, p.read_bytes) for p in files]
    if zipfile.is_zipfile(path):
        zf = zipfile.ZipFile(path)
        names = sorted(n for n in zf.namelist() if n.endswith(".txt"))
        return [(os.path.basename(n), (lambda n=n: zf.read(n))) for n in names]
    if tarfile.is_tarfile(path):
        tf = tarfile.open(path)
        members = sorted((m for m in tf.getmembers() if m.isfile() and m.name.endswith(".txt")), key=lambda m: m.name)
        # tarfile objects are not thread-safe; read eagerly
        blobs = [(os.path.basename(m.name), tf.extractfile(m).read()) for m in members]
        return [(n, (lambda b=b: b)) for n, b in blobs]
    raise ValueError(f"{path}: not a directory, zip or tar archive")


def parse_training_set(path, threads: int = 1) -> RatingStore:
    """Parse a ``training_set`` directory (or zip/tar archive of it).

    Files are read in name order; rows keep file order. Duplicate
    (user, movie) pairs raise ParseError pointing at the second occurrence.
    """
    sources = _iter_sources(Path(path))

    def work(item):
        name, load = item
        return name, _parse_block(name, load())

    if threads > 1 and len(sources) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(work, sources))
    else:
        blocks = [work(s) for s in sources]

    if not blocks:
        return RatingStore.empty()
    users = np.concatenate([b[1] for _, b in blocks])
    movies = np.concatenate([np.full(len(b[1]), b[0], dtype=np.int64) for _, b in blocks])
    ratings = np.concatenate([b[2] for _, b in blocks])
    days = np.concatenate([b[3] for _, b in blocks])
    if len(users) and (users.min() < 0 or users.max() > np.iinfo(np.int32).max):
        raise ValueError("user id out of int32 range")
    _check_duplicates(users, movies, blocks, {name: load for name, load in sources})
    _log.info("parsed %d ratings from %d files", len(users), len(blocks))
    return RatingStore(users, movies, ratings, days)


def _check_duplicates(users, movies, blocks, loaders) -> None:
    if len(users) < 2:
        return
    key = users.astype(np.int64) * (int(movies.max()) + 1) + movies
    order = np.argsort(key, kind="stable")
    ks = key[order]
    dup = np.flatnonzero(ks[1:] == ks[:-1])
    if not len(dup):
        return
    row = int(order[dup[0] + 1])
    start = 0
    for name, block in blocks:
        if row < start + len(block[1]):
            break
        start += len(block[1])
    linenos = _slow_parse_block(name, loaders[name]())[4]
    raise ParseError(
        name, linenos[row - start], f"duplicate rating for user {users[row]}, movie {movies[row]}"
    )


def write_training_set(store: RatingStore, directory) -> None:
    """Serialize a store to per-movie ``mv_XXXXXXX.txt`` files.

    Movies are written in first-seen order, rows keep store order, so a store
    grouped by ascending movie id round-trips exactly through parse.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    dates = (store.days.astype(np.int64) + _EPOCH64).astype(str)
    for dense in range(store.n_movies):
        movie = int(store.movie_index.ids[dense])
        rows = np.flatnonzero(store.movie_idx == dense)
        lines = [f"{movie}:"]
        lines += [f"{store.users[r]},{store.ratings[r]},{dates[r]}" for r in rows]
        (out / f"mv_{movie:07d}.txt").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# other Netflix files


@dataclass(frozen=True)
class MovieEntry:
    movie: int
    year: Optional[int]
    title: str


class MovieCatalog(dict):
    """Mapping external movie id -> MovieEntry."""

    def title(self, movie: int) -> str:
        return self[movie].title


def parse_movie_titles(path, encoding: str = "latin-1") -> MovieCatalog:
    catalog = MovieCatalog()
    name = Path(path).name
    with open(path, encoding=encoding, newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(",", 2)
            if len(parts) < 3:
                raise ParseError(name, lineno, "expected 'MovieID,YearOfRelease,Title'")
            try:
                movie = int(parts[0])
            except ValueError:
                raise ParseError(name, lineno, f"non-integer movie id {parts[0]!r}") from None
            year_text = parts[1].strip()
            if year_text.upper() == "NULL" or not year_text:
                year = None
            else:
                try:
                    year = int(year_text)
                except ValueError:
                    raise ParseError(name, lineno, f"non-integer year {year_text!r}") from None
            if movie in catalog:
                raise ParseError(name, lineno, f"duplicate movie id {movie}")
            catalog[movie] = MovieEntry(movie, year, parts[2])
    return catalog


def _iter_blocks(path) -> Iterator[tuple[int, int, Optional[int], str]]:
    """Yield (lineno, movie, None, line) for body lines of a header/body file."""
    name = Path(path).name
    movie = None
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            m = _HEADER_RE.match(line)
            if m:
                movie = int(m.group(1))
                continue
            if movie is None:
                raise ParseError(name, lineno, "data line before any '<movie id>:' header")
            yield lineno, movie, line.decode("ascii", "replace")


def parse_probe(path) -> list[tuple[int, int]]:
    """Flat ``(movie, user)`` pairs in file order."""
    name = Path(path).name
    pairs = []
    for lineno, movie, line in _iter_blocks(path):
        try:
            pairs.append((movie, int(line)))
        except ValueError:
            raise ParseError(name, lineno, f"non-integer customer id {line!r}") from None
    return pairs


def parse_qualifying(path) -> list[tuple[int, int, dt.date]]:
    """Flat ``(movie, user, date)`` tuples in file order."""
    name = Path(path).name
    rows = []
    for lineno, movie, line in _iter_blocks(path):
        parts = line.split(",")
        try:
            if len(parts) != 2 or not _DATE_RE.match(parts[1]):
                raise ValueError
            rows.append((movie, int(parts[0]), dt.date.fromisoformat(parts[1])))
        except ValueError:
            raise ParseError(name, lineno, f"expected 'CustomerID,Date', got {line[:40]!r}") from None
    return rows


# --------------------------------------------------------------------------
# splitting


def temporal_split(store: RatingStore, train_fraction: float = 0.8) -> tuple[RatingStore, RatingStore]:
    """Earliest ``floor(fraction * N)`` ratings go to train, the rest to test.

    Rows are ordered by (date, user id, movie id) so the boundary is
    deterministic when many ratings share the boundary date.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if len(store) == 0:
        raise ValueError("cannot split an empty store")
    order = np.lexsort((store.movies, store.users, store.days))
    n_train = int(np.floor(train_fraction * len(store)))
    return store.take(order[:n_train]), store.take(order[n_train:])


# --------------------------------------------------------------------------
# sparse matrix


class SparseRatingMatrix:
    """Rating matrix in both user-major and movie-major compressed form.

    ``user_ptr[u]:user_ptr[u+1]`` slices ``user_movies``/``user_ratings``;
    the movie-major view is laid out the same way. Inner lists are sorted
    by id.
    """

    def __init__(self, n_users: int, n_movies: int, rows, cols, vals, user_ids=None, movie_ids=None):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        self.n_users = int(n_users)
        self.n_movies = int(n_movies)
        self.user_ids = None if user_ids is None else IdIndex(user_ids)
        self.movie_ids = None if movie_ids is None else IdIndex(movie_ids)

        ou = np.lexsort((cols, rows))
        self.user_ptr = _ptr(rows, self.n_users)
        self.user_movies = cols[ou].astype(np.int32)
        self.user_ratings = vals[ou]
        om = np.lexsort((rows, cols))
        self.movie_ptr = _ptr(cols, self.n_movies)
        self.movie_users = rows[om].astype(np.int32)
        self.movie_ratings = vals[om]
        # row/col of each entry in user-major order, handy for SGD loops
        self.entry_users = rows[ou].astype(np.int32)
        if len(rows) > 1:
            same = (self.entry_users[1:] == self.entry_users[:-1]) & (self.user_movies[1:] == self.user_movies[:-1])
            if same.any():
                raise ValueError("duplicate (user, movie) entries")
        for arr in (self.user_ptr, self.user_movies, self.user_ratings, self.movie_ptr,
                    self.movie_users, self.movie_ratings, self.entry_users):
            arr.setflags(write=False)

    @property
    def nnz(self) -> int:
        return len(self.user_ratings)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_users, self.n_movies

    def by_user(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.user_ptr[u], self.user_ptr[u + 1]
        return self.user_movies[s:e], self.user_ratings[s:e]

    def by_movie(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.movie_ptr[j], self.movie_ptr[j + 1]
        return self.movie_users[s:e], self.movie_ratings[s:e]

    def user_counts(self) -> np.ndarray:
        return np.diff(self.user_ptr)

    def movie_counts(self) -> np.ndarray:
        return np.diff(self.movie_ptr)

    def rating(self, u: int, j: int) -> Optional[float]:
        movies, vals = self.by_user(u)
        k = np.searchsorted(movies, j)
        if k < len(movies) and movies[k] == j:
            return float(vals[k])
        return None

    @cached_property
    def user_sq_norms(self) -> np.ndarray:
        return np.bincount(self.entry_users, weights=self.user_ratings**2, minlength=self.n_users)

    @cached_property
    def movie_sq_norms(self) -> np.ndarray:
        return np.bincount(self.user_movies, weights=self.user_ratings**2, minlength=self.n_movies)

    @cached_property
    def user_norms(self) -> np.ndarray:
        return np.sqrt(self.user_sq_norms)

    @cached_property
    def movie_norms(self) -> np.ndarray:
        return np.sqrt(self.movie_sq_norms)

    def to_dense(self) -> np.ndarray:
        """Dense copy with 0 for missing cells. Test-sized matrices only."""
        out = np.zeros((self.n_users, self.n_movies))
        out[self.entry_users, self.user_movies] = self.user_ratings
        return out


def _ptr(index: np.ndarray, n: int) -> np.ndarray:
    ptr = np.zeros(n + 1, dtype=np.int64)
    if len(index):
        np.cumsum(np.bincount(index, minlength=n), out=ptr[1:])
    return ptr


def build_matrix(store: RatingStore) -> SparseRatingMatrix:
    return SparseRatingMatrix(
        store.n_users,
        store.n_movies,
        store.user_idx,
        store.movie_idx,
        store.ratings,
        user_ids=store.user_index.ids,
        movie_ids=store.movie_index.ids,
    )


# --------------------------------------------------------------------------
# binary cache and CSV export

_HEADER_DTYPE = np.dtype([("version", "<u2"), ("n", "<u8"), ("n_users", "<u4"), ("n_movies", "<u4"), ("fp_len", "<u4")])


def save_store(store: RatingStore, path, fingerprint: str = "") -> None:
    """Write the compact little-endian ``NFLX1`` cache file."""
    fp = fingerprint.encode()
    header = np.array([(CACHE_VERSION, len(store), store.n_users, store.n_movies, len(fp))], dtype=_HEADER_DTYPE)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(header.tobytes())
        fh.write(fp)
        for arr, dtype in ((store.users, "<i4"), (store.movies, "<i4"), (store.ratings, "<i1"), (store.days, "<i2")):
            fh.write(arr.astype(dtype).tobytes())
    os.replace(tmp, path)


def read_cache_fingerprint(path) -> Optional[str]:
    try:
        with open(path, "rb") as fh:
            if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
                return None
            header = np.frombuffer(fh.read(_HEADER_DTYPE.itemsize), dtype=_HEADER_DTYPE)[0]
            if header["version"] != CACHE_VERSION:
                return None
            return fh.read(int(header["fp_len"])).decode()
    except (OSError, IndexError, ValueError):
        return None


def load_store(path) -> RatingStore:
    with open(path, "rb") as fh:
        if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
            raise ValueError(f"{path}: bad magic, not an NFLX1 cache")
        header = np.frombuffer(fh.read(_HEADER_DTYPE.itemsize), dtype=_HEADER_DTYPE)[0]
        if header["version"] != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {header['version']}")
        fh.read(int(header["fp_len"]))
        n = int(header["n"])
        users = np.frombuffer(fh.read(4 * n), dtype="<i4")
        movies = np.frombuffer(fh.read(4 * n), dtype="<i4")
        ratings = np.frombuffer(fh.read(n), dtype="<i1")
        days = np.frombuffer(fh.read(2 * n), dtype="<i2")
    store = RatingStore(users, movies, ratings, days)
    if store.n_users != header["n_users"] or store.n_movies != header["n_movies"]:
        raise ValueError(f"{path}: corrupt cache (id counts disagree with header)")
    return store


def write_csv(store: RatingStore, path) -> None:
    dates = (store.days.astype(np.int64) + _EPOCH64).astype(str)
    frame = pd.DataFrame({"user": store.users, "movie": store.movies, "rating": store.ratings, "date": dates})
    frame.to_csv(path, index=False, lineterminator="\n")


def read_csv(path) -> RatingStore:
    frame = pd.read_csv(path, dtype={"user": np.int64, "movie": np.int64, "rating": np.int64, "date": str})
    days = (frame["date"].to_numpy(dtype=str).astype("datetime64[D]") - _EPOCH64).astype(np.int64)
    return RatingStore(frame["user"].to_numpy(), frame["movie"].to_numpy(), frame["rating"].to_numpy(), days)
