# CHE Toolkit - Tests Package
