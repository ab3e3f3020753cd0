namespace sardiff {}
