// C bindings land here once the core API settles.
