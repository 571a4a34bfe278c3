"""Reference segmenters the U-Net is benchmarked against."""
