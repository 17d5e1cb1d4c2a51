# Package for the dpvil command-line tool
