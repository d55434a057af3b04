//! Doctest anchors for the guide (in progress).
