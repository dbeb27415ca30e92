"""armsight: synthetic robot-arm perception with a multi-objective CNN
and two-stage transfer learning, built on a small reverse-mode autodiff
tape."""

__version__ = "0.1.0"
