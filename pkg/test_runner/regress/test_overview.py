import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from docnav.corpus import Corpus, Document, Page
from docnav.overview import (
    THUMB_SIZE,
    build_overview,
    grid_dims,
    layout_token_cost,
    letterbox,
    overview_layout,
    overview_token_cost,
    partition_groups,
    render_header,
    write_overview,
)


def blank_document(n_pages: int, width: int = 64, height: int = 48) -> Document:
    raster = Image.new("RGB", (width, height), "white")
    pages = tuple(
        Page(index=i, width=width, height=height, raster=raster) for i in range(1, n_pages + 1)
    )
    return Document(doc_id=f"blank{n_pages}", pages=pages)


@pytest.mark.parametrize(
    "n, expected",
    [(1, (1, 1)), (2, (2, 1)), (4, (2, 2)), (5, (3, 2)), (14, (4, 4)), (28, (6, 5)), (36, (6, 6))],
)
def test_grid_dims(n: int, expected):
    assert grid_dims(n) == expected


def test_grid_dims_fits_every_cell():
    for n in range(1, 400):
        rows, cols = grid_dims(n)
        assert rows * cols >= n
        # never a completely empty row
        assert (rows - 1) * cols < n


def test_partition_groups():
    assert partition_groups(40, 36) == [range(1, 37), range(37, 41)]
    assert partition_groups(36, 36) == [range(1, 37)]
    assert partition_groups(1, 36) == [range(1, 2)]
    with pytest.raises(ValueError):
        partition_groups(0, 36)
    with pytest.raises(ValueError):
        partition_groups(10, 0)


def test_forty_pages_make_two_grids():
    overview = build_overview(blank_document(40))
    assert overview.k == 2
    assert [(img.rows, img.cols) for img in overview.images] == [(6, 6), (2, 2)]
    assert overview.images[1].pages == [37, 38, 39, 40]


def test_fifty_pages_leave_two_blank_cells():
    overview = build_overview(blank_document(50))
    second = overview.images[1]
    assert (second.rows, second.cols) == (4, 4)
    assert second.cells.count(None) == 2
    assert second.cells[:14] == tuple(range(37, 51))
    # blank cells stay white, header included
    box = second.cell_box(3, 3)
    pixels = np.asarray(second.composite.crop(box))
    assert (pixels == 255).all()


def test_cells_are_row_major_with_headers():
    doc = blank_document(7)
    img = build_overview(doc, header_height=28).images[0]
    assert (img.rows, img.cols) == (3, 3)
    assert img.cell_at(0, 0) == 1
    assert img.cell_at(1, 0) == 4
    assert img.cell_at(2, 0) == 7
    assert img.cell_at(2, 1) is None

    left, top, right, _ = img.cell_box(1, 2)
    header = np.asarray(img.composite.crop((left, top, right, top + 28)))
    assert (header == render_header(6, THUMB_SIZE, 28)).all()


def test_composite_size():
    img = build_overview(blank_document(36)).images[0]
    assert (img.width, img.height) == (6 * 256, 6 * (256 + 28))


def test_zero_header_height():
    overview = build_overview(blank_document(5), header_height=0)
    assert overview.images[0].height == 3 * 256
    with pytest.raises(ValueError):
        build_overview(blank_document(5), header_height=-1)


def test_render_header_draws_distinct_labels():
    one = render_header(1)
    twelve = render_header(12)
    assert one.shape == (28, 256, 3)
    assert (one == 0).any()
    assert not (one == twelve).all()
    # too small for any glyph
    assert (render_header(123, width=10, height=5) == 255).all()


def test_letterbox_keeps_aspect():
    img = Image.new("RGB", (1024, 512), "black")
    thumb = letterbox(img)
    assert thumb.size == (256, 256)
    pixels = np.asarray(thumb)
    # 256x128 black band centered vertically, white above and below
    assert (pixels[64:192] == 0).all()
    assert (pixels[:64] == 255).all()
    assert (pixels[192:] == 255).all()


def test_token_compression_for_hundred_pages():
    doc = Document(
        doc_id="big",
        pages=tuple(Page(index=i, width=1024, height=768) for i in range(1, 101)),
    )
    full = doc.full_token_cost()
    compressed = layout_token_cost(100)
    assert full == 103600
    assert compressed == 3355 + 3355 + 2806
    assert full > 100_000
    assert 9 <= full / compressed <= 13


def test_layout_matches_rendering():
    doc = blank_document(50)
    overview = build_overview(doc)
    assert [(r, c, w, h) for r, c, w, h in overview_layout(50)] == [
        (img.rows, img.cols, img.width, img.height) for img in overview.images
    ]
    assert overview_token_cost(overview) == layout_token_cost(50)


def test_single_page_single_row_header():
    overview = build_overview(blank_document(1), header_height=28)
    assert overview.images[0].token_cost == 10 * 11


def test_write_overview(small_corpus: Corpus, test_output_dir: Path):
    overview = build_overview(small_corpus.document("doc000"), capacity=5)
    paths = write_overview(overview, test_output_dir / "doc000")
    assert [p.name for p in paths] == ["overview_1.png", "overview_2.png", "overview_3.png"]
    with Image.open(paths[2]) as img:
        assert img.size == (overview.images[2].width, overview.images[2].height)

    sidecar = json.loads((test_output_dir / "doc000" / "overview.json").read_text())
    assert sidecar["doc_id"] == "doc000"
    assert [i["k"] for i in sidecar["images"]] == [1, 2, 3]
    assert sidecar["images"][2]["cells"] == [[11], [12]]
    assert sidecar["token_cost"] == overview_token_cost(overview)
