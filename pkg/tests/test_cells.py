import pytest

from hospmrp.cells import (
    ALL_CELLS,
    CELL_MALE,
    N_CELLS,
    Demographics,
    LevelError,
    cell_index,
    normalize_level,
)


def test_grid_has_sixty_distinct_cells():
    assert N_CELLS == 60
    assert len(set(ALL_CELLS)) == 60
    assert [cell_index(c) for c in ALL_CELLS] == list(range(60))


def test_levels_are_case_insensitive():
    d = Demographics(" Female", "35-64", "WHITE", "lake")
    assert d == Demographics("female", "35-64", "white", "Lake")
    assert d.male == -0.5
    assert Demographics("male", "75+", "other", "Porter").male == 0.5


def test_unknown_level_lists_allowed_levels():
    with pytest.raises(LevelError, match="0-17, 18-34, 35-64, 65-74, 75\\+"):
        normalize_level("age_group", "90+")


def test_sex_coding_is_centered():
    assert CELL_MALE.sum() == 0.0
    assert set(CELL_MALE) == {-0.5, 0.5}
