import pytest

from zerodoc.core import LanguageClass
from zerodoc.fonts import (
    BUNDLED_SANS,
    FontError,
    MonospaceMetrics,
    TrueTypeMetrics,
    buffer_coefficient,
    bundled_font_path,
    default_metrics,
    load_font,
    missing_glyphs,
)


def test_buffer_coefficients():
    assert buffer_coefficient(LanguageClass.LATIN) == 1.05
    assert buffer_coefficient(LanguageClass.LOGOGRAPHIC) == 1.01


class TestMonospaceMetrics:
    def test_width_is_per_character(self, mono):
        assert mono.text_width("HELLO WORLD", 28) == pytest.approx(11 * 0.6 * 28)
        assert mono.text_width("", 28) == 0

    def test_line_height(self, mono):
        assert mono.line_height(10) == pytest.approx(12.0)

    def test_invalid_factors_rejected(self):
        with pytest.raises(ValueError):
            MonospaceMetrics(char_width_factor=0)
        with pytest.raises(ValueError):
            MonospaceMetrics(line_height_factor=-1)

    def test_width_strictly_increasing_in_size(self, mono):
        widths = [mono.text_width("abc", s) for s in range(8, 40)]
        assert all(b > a for a, b in zip(widths, widths[1:]))


class TestBundledFont:
    def test_bundled_fonts_exist(self):
        assert bundled_font_path().is_file()
        assert bundled_font_path(BUNDLED_SANS).is_file()

    def test_missing_bundled_font_rejected(self):
        with pytest.raises(FontError):
            bundled_font_path("NoSuchFont.ttf")

    def test_load_font_caches(self):
        path = str(bundled_font_path())
        assert load_font(path, 14) is load_font(path, 14)
        assert load_font(path, 14) is not load_font(path, 15)

    def test_load_font_bad_path(self):
        with pytest.raises(FontError):
            load_font("/nonexistent/font.ttf", 12)


class TestTrueTypeMetrics:
    def test_width_increases_with_size(self, ttf_metrics):
        widths = [ttf_metrics.text_width("sample text", s) for s in (8, 16, 32)]
        assert widths[0] < widths[1] < widths[2]

    def test_line_height_at_least_factor(self, ttf_metrics):
        for size in (8, 12, 24, 48):
            assert ttf_metrics.line_height(size) >= 1.2 * size

    def test_monospace_font_width_is_linear_in_chars(self, ttf_metrics):
        one = ttf_metrics.text_width("a", 20)
        assert ttf_metrics.text_width("abcde", 20) == pytest.approx(5 * one)

    def test_bad_font_path_fails_on_construction(self):
        with pytest.raises(FontError):
            TrueTypeMetrics("/nonexistent/font.ttf")

    def test_default_metrics_uses_bundled_mono(self):
        metrics = default_metrics()
        assert metrics.font_path == str(bundled_font_path())


class TestMissingGlyphs:
    def test_ascii_covered(self):
        font = load_font(str(bundled_font_path()), 16)
        assert missing_glyphs(font, "The quick brown fox 0123456789!?") == []

    def test_cjk_reported_once_each(self):
        font = load_font(str(bundled_font_path()), 16)
        missing = missing_glyphs(font, "ab漢漢字cd")
        assert missing == ["漢", "字"]

    def test_whitespace_always_drawable(self):
        font = load_font(str(bundled_font_path()), 16)
        assert missing_glyphs(font, " \t\n") == []
