"""Dataset acquisition and conversion into the canonical file formats.

Canonical files are the plain TSV formats consumed by :mod:`idcl.data`:
``interactions.tsv`` (user, item, rating, timestamp) and
``item_concepts.tsv`` (item, concept name). MovieLens archives are fetched
from the public mirror and converted; a deterministic synthetic generator
provides a desk-scale dataset with planted concept-driven intents for tests
and demos.
"""

from __future__ import annotations

import hashlib
import urllib.request
import zipfile
from pathlib import Path

import numpy as np

from .data import ParseError

ARCHIVES = {
    "ml-100k": {
        "url": "https://files.grouplens.org/datasets/movielens/ml-100k.zip",
        "md5": "0e33842e24a9c977be4e0107933c0723",
        "subdir": "ml-100k",
    },
    "ml-1m": {
        "url": "https://files.grouplens.org/datasets/movielens/ml-1m.zip",
        "md5": "c4d9eecfca2ab87c1945afe126590906",
        "subdir": "ml-1m",
    },
}


class ChecksumError(RuntimeError):
    pass


def fetch_archive(name: str, dest_dir, *, url: str | None = None, verify: bool = True) -> Path:
    """Download and extract a known archive; returns the extracted directory.

    A checksum mismatch removes the downloaded file and raises. Existing
    extracted directories are reused.
    """
    if name not in ARCHIVES:
        raise ValueError(f"unknown dataset archive {name!r}; known: {sorted(ARCHIVES)}")
    spec = ARCHIVES[name]
    dest_dir = Path(dest_dir)
    dest_dir.mkdir(parents=True, exist_ok=True)
    extracted = dest_dir / spec["subdir"]
    if extracted.is_dir():
        return extracted
    archive_path = dest_dir / f"{name}.zip"
    if not archive_path.exists():
        urllib.request.urlretrieve(url or spec["url"], archive_path)
    if verify:
        digest = hashlib.md5(archive_path.read_bytes()).hexdigest()
        if digest != spec["md5"]:
            archive_path.unlink()
            raise ChecksumError(
                f"{name}: archive md5 {digest} != expected {spec['md5']}; removed the file"
            )
    with zipfile.ZipFile(archive_path) as zf:
        zf.extractall(dest_dir)
    if not extracted.is_dir():
        raise RuntimeError(f"{name}: archive did not contain {spec['subdir']}/")
    return extracted


def convert_ml100k(raw_dir, interactions_path, concepts_path, *, include_unknown_genre: bool = False) -> None:
    """Write canonical TSVs from an extracted ml-100k directory.

    ``u.data`` already matches the interaction format and is copied through.
    Genres come from the flag columns of ``u.item`` against the ``u.genre``
    vocabulary; the placeholder "unknown" genre is dropped by default so the
    concept set is the 18 real genres.
    """
    raw_dir = Path(raw_dir)
    data = raw_dir / "u.data"
    genre_file = raw_dir / "u.genre"
    item_file = raw_dir / "u.item"
    for required in (data, genre_file, item_file):
        if not required.exists():
            raise FileNotFoundError(f"missing MovieLens file: {required}")
    Path(interactions_path).write_bytes(data.read_bytes())

    genres = []
    for line in genre_file.read_text(encoding="latin-1").splitlines():
        if not line.strip():
            continue
        name, _, idx = line.partition("|")
        genres.append((int(idx), name))
    genres.sort()
    names = [name for _, name in genres]

    with open(concepts_path, "w", encoding="utf-8") as out:
        for lineno, line in enumerate(item_file.read_text(encoding="latin-1").splitlines(), 1):
            if not line.strip():
                continue
            fields = line.split("|")
            flags = fields[-len(names):]
            if len(fields) < len(names) + 1:
                raise ParseError(f"{item_file}: line {lineno}: too few fields")
            item_id = fields[0]
            for name, flag in zip(names, flags):
                if flag != "1":
                    continue
                if name == "unknown" and not include_unknown_genre:
                    continue
                out.write(f"{item_id}\t{name}\n")


def convert_ml1m(raw_dir, interactions_path, concepts_path) -> None:
    """Write canonical TSVs from an extracted ml-1m directory."""
    raw_dir = Path(raw_dir)
    ratings = raw_dir / "ratings.dat"
    movies = raw_dir / "movies.dat"
    for required in (ratings, movies):
        if not required.exists():
            raise FileNotFoundError(f"missing MovieLens file: {required}")
    with open(interactions_path, "w", encoding="utf-8") as out:
        for line in ratings.read_text(encoding="latin-1").splitlines():
            if not line.strip():
                continue
            user, item, rating, ts = line.split("::")
            out.write(f"{user}\t{item}\t{rating}\t{ts}\n")
    with open(concepts_path, "w", encoding="utf-8") as out:
        for line in movies.read_text(encoding="latin-1").splitlines():
            if not line.strip():
                continue
            item, _title, genre_list = line.split("::")
            for genre in genre_list.split("|"):
                out.write(f"{item}\t{genre}\n")


def generate_synthetic(
    interactions_path,
    concepts_path,
    *,
    num_users: int = 400,
    num_items: int = 800,
    num_concepts: int = 10,
    mean_degree: int = 18,
    latent_dim: int = 16,
    exploration: float = 0.1,
    seed: int = 7,
) -> None:
    """Desk-scale dataset with concept-driven user intents.

    Items belong to one or two concepts; each user prefers a sparse mixture
    of concepts; interactions are the user's top-affinity items with noise
    plus an ``exploration`` fraction of uniformly random picks. Degrees are
    kept low so the behavior data stays sparse, the regime the intent
    machinery targets. Ratings grade affinity into 1..5 so rating thresholds
    stay meaningful.
    """
    rng = np.random.default_rng(seed)
    concept_vecs = rng.normal(size=(num_concepts, latent_dim))
    primary = rng.integers(0, num_concepts, size=num_items)
    secondary = rng.integers(0, num_concepts, size=num_items)
    has_secondary = (rng.random(num_items) < 0.4) & (secondary != primary)

    item_vecs = concept_vecs[primary].copy()
    item_vecs[has_secondary] = 0.5 * (
        concept_vecs[primary[has_secondary]] + concept_vecs[secondary[has_secondary]]
    )
    item_vecs += 0.4 * rng.normal(size=item_vecs.shape)

    user_mix = rng.dirichlet(np.full(num_concepts, 0.25), size=num_users)
    user_vecs = user_mix @ concept_vecs + 0.3 * rng.normal(size=(num_users, latent_dim))

    degrees = np.clip(
        rng.lognormal(np.log(mean_degree), 0.45, size=num_users), 5, num_items // 2
    ).astype(int)

    with open(interactions_path, "w", encoding="utf-8") as out:
        timestamp = 0
        for user in range(num_users):
            affinity = item_vecs @ user_vecs[user]
            affinity += rng.gumbel(0.0, 1.0, size=num_items)
            explore = rng.random(num_items) < exploration
            affinity[explore] += rng.uniform(0.0, affinity.max(), size=int(explore.sum()))
            chosen = np.argsort(-affinity)[: degrees[user]]
            ranks = np.empty(len(chosen), dtype=np.int64)
            ranks[np.argsort(-affinity[chosen], kind="stable")] = np.arange(len(chosen))
            for item, rank in zip(chosen, ranks):
                rating = 5 - min(4, int(4 * rank / max(1, len(chosen) - 1)))
                timestamp += 1
                out.write(f"u{user}\ti{item}\t{rating}\t{timestamp}\n")

    with open(concepts_path, "w", encoding="utf-8") as out:
        for item in range(num_items):
            out.write(f"i{item}\tc{primary[item]}\n")
            if has_secondary[item]:
                out.write(f"i{item}\tc{secondary[item]}\n")
