// implemented in a later step
