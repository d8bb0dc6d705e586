"""Matrix-free operators for unfitted finite element discretizations of the Poisson problem."""

__version__ = "0.1.0"
