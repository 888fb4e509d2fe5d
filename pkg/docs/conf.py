# -*- coding: utf-8 -*-
#
# mafnet documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.

import os
import sys

# autodoc imports the package from the source tree
sys.path.insert(0, os.path.abspath(".."))

# -- General configuration ------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.intersphinx",
    "sphinx.ext.viewcode",
]

templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"

project = "mafnet"
copyright = "2024, mafnet developers"

# The short X.Y version.
version = "0.1"
# The full version, including alpha/beta/rc tags.
release = "0.1.0"

exclude_patterns = ["_build"]
pygments_style = "sphinx"

# torch and matplotlib are heavy; autodoc only needs the signatures
autodoc_mock_imports = ["torch", "matplotlib", "skimage"]

# -- Options for HTML output ----------------------------------------------

html_theme = "default"
html_static_path = ["_static"]
htmlhelp_basename = "mafnetdoc"

# -- Options for LaTeX output ---------------------------------------------

latex_documents = [
    ("index", "mafnet.tex", "mafnet Documentation", "mafnet developers", "manual"),
]

# -- Options for manual page output ---------------------------------------

man_pages = [("index", "mafnet", "mafnet Documentation", ["mafnet developers"], 1)]

# -- Options for Texinfo output -------------------------------------------

texinfo_documents = [
    (
        "index",
        "mafnet",
        "mafnet Documentation",
        "mafnet developers",
        "mafnet",
        "Hyperspectral image denoising with multiscale adaptive fusion.",
        "Miscellaneous",
    ),
]

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
}
