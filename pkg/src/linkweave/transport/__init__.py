"""Wire codec and real TCP links."""
