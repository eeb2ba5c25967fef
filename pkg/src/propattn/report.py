"""Self-contained SVG scatter: x = throughput, y = quality, circle area ~ memory."""
import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT, PAD = 640, 420, 60
R_MIN, R_MAX = 4.0, 28.0


def _scale(v, lo, hi, a, b):
    return (a + b) / 2 if hi == lo else a + (v - lo) / (hi - lo) * (b - a)


def svg_scatter(points, title="throughput vs quality", x_label="iterations / s", y_label="quality"):
    """Render ``points`` (dicts with label, x, y, size) as an SVG document string."""
    xs = [p["x"] for p in points] or [0.0]
    ys = [p["y"] for p in points] or [0.0]
    ss = [math.sqrt(max(p["size"], 0.0)) for p in points] or [0.0]
    x0, x1 = PAD, WIDTH - PAD
    y0, y1 = HEIGHT - PAD, PAD
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<title>{escape(title)}</title>',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
           f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 15}" text-anchor="middle">{escape(x_label)}</text>',
           f'<text x="15" y="{(y0 + y1) / 2}" transform="rotate(-90 15 {(y0 + y1) / 2})" '
           f'text-anchor="middle">{escape(y_label)}</text>']
    for p, s in zip(points, ss):
        cx = _scale(p["x"], min(xs), max(xs), x0 + R_MAX, x1 - R_MAX)
        cy = _scale(p["y"], min(ys), max(ys), y0 - R_MAX, y1 + R_MAX)
        r = _scale(s, min(ss), max(ss), R_MIN, R_MAX)
        out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r:.2f}" fill="steelblue" '
                   f'fill-opacity="0.5" stroke="navy"><title>{escape(p["label"])}</title></circle>')
        out.append(f'<text x="{cx:.2f}" y="{cy - r - 3:.2f}" font-size="11" '
                   f'text-anchor="middle">{escape(p["label"])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(points, path, **kw):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg_scatter(points, **kw))
