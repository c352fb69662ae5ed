"""Fast formation of immersed B-spline matrices with (discontinuous) weighted quadrature."""

__version__ = "0.1.0"
