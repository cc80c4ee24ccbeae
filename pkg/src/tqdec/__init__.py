"""Query-based temporal decoder for long-video quality scoring.

Pre-extracted clip features go through a small transformer decoder whose
learned queries each attend to a part of the video; per-query quality
scores and weights combine into one interpretable final score.
"""

__version__ = "0.1.0"
