"""Image I/O, preprocessing, phantom generation and dataset manifests."""
