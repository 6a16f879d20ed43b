# Package marker for scripts


